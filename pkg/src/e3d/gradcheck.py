"""Central finite-difference verification of the analytic backward passes.

The scalar objective is ``sum(R * f(inputs))`` for a fixed seeded ``R``;
its analytic gradient is ``pullback(R)``. Every component of every checked
input is perturbed by +/-eps and compared with relative error
``|a - n| / max(|a|, |n|, 1e-8)``. The difference f(x+eps) - f(x-eps) is
accumulated as ``sum(R * (y+ - y-))`` so cancellation happens per element
rather than between two large sums.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .model import NetConfig, TcaBlockParams, build_network, channel_gate, network_forward, tca_forward
from .ops import ConvParams, GradPair
from .tensor import channel_broadcast_mul, elem_add

EPS = 1e-5
DEFAULT_TOL = 1e-4
DENOM_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    name: str
    shapes: Dict[str, Tuple[int, ...]]
    max_rel_error: float
    worst: Optional[Tuple[str, int]]
    tolerance: float
    n_checked: int
    seconds: float = 0.0
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        shapes = " ".join(f"{k}={tuple(v)}" for k, v in self.shapes.items())
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} {self.name} [{shapes}] max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:g} n={self.n_checked}"
        if self.worst is not None:
            line += f" worst={self.worst[0]}[{self.worst[1]}]"
        if self.error:
            line += f" error={self.error}"
        return line


def seeded_uniform(shape, seed: int, low=-1.0, high=1.0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(low, high, size=shape)


def check_gradients(
    name: str,
    fn: Callable[[Dict[str, np.ndarray]], GradPair],
    inputs: Dict[str, np.ndarray],
    tolerance: float = DEFAULT_TOL,
    eps: float = EPS,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``fn``'s pullback with central differences on every input entry.

    ``fn`` maps the input dict to a GradPair whose pullback returns a dict
    of gradients with the same keys. Inputs are perturbed in place and
    restored.
    """
    t0 = time.perf_counter()
    shapes = {k: v.shape for k, v in inputs.items()}
    for k, v in inputs.items():
        if v.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 inputs; {k} is {v.dtype}")
    base = fn(inputs)
    r = np.random.default_rng(seed + 7919).uniform(-1, 1, size=np.shape(base.value))
    analytic = base.pullback(r)

    def output() -> np.ndarray:
        return fn(inputs).value

    worst_err, worst_at, count = 0.0, None, 0
    for key, arr in inputs.items():
        a = np.asarray(analytic[key])
        if a.shape != arr.shape:
            return GradCheckReport(name, shapes, np.inf, (key, -1), tolerance, count,
                                   error=f"gradient shape {a.shape} != input shape {arr.shape}")
        if not np.all(np.isfinite(a)):
            bad = int(np.flatnonzero(~np.isfinite(a))[0])
            return GradCheckReport(name, shapes, np.inf, (key, bad), tolerance, count,
                                   error="non-finite analytic gradient")
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            yp = output()
            flat[i] = orig - eps
            ym = output()
            flat[i] = orig
            if not (np.all(np.isfinite(yp)) and np.all(np.isfinite(ym))):
                return GradCheckReport(name, shapes, np.inf, (key, i), tolerance, count,
                                       error="non-finite output")
            num = float(np.sum(r * (yp - ym))) / (2 * eps)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), DENOM_FLOOR)
            count += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (key, i)
    return GradCheckReport(name, shapes, worst_err, worst_at, tolerance, count,
                           seconds=time.perf_counter() - t0)


def _conv_params(rng, co, ci, kernel, stride=1, padding=0, bias=True) -> ConvParams:
    w = rng.uniform(-1, 1, size=(co, ci, *kernel))
    b = rng.uniform(-1, 1, size=co) if bias else None
    return ConvParams(w, b, stride, padding)


def random_block(rng, c: int, r: int = 4, downsample: bool = False, global_context: bool = True,
                 flat: bool = False, scale: float = 0.5) -> TcaBlockParams:
    k = (1, 3, 3) if flat else (3, 3, 3)
    pad = (0, 1, 1) if flat else (1, 1, 1)
    stride = (1, 2, 2) if downsample else (1, 1, 1)
    hidden = max(c // r, 1)
    p = TcaBlockParams(
        _conv_params(rng, c, c, k, stride, pad),
        _conv_params(rng, c, c, k, 1, pad),
        _conv_params(rng, hidden, c, (1, 1, 1)),
        _conv_params(rng, c, hidden, (1, 1, 1)),
        _conv_params(rng, c, c, (1, 1, 1), stride) if downsample else None,
        global_context,
    )
    for arr in p.named_params().values():
        arr *= scale
    return p


def _bind(params: Dict[str, np.ndarray], inputs: Dict[str, np.ndarray], prefix: str = "") -> Dict[str, np.ndarray]:
    """Register parameter arrays as checkable inputs (shared memory)."""
    for k, v in params.items():
        inputs[prefix + k] = v
    return inputs


# -- named checks ------------------------------------------------------------

def _check_elem_add(seed):
    inputs = {"a": seeded_uniform((1, 2, 2, 3, 3), seed), "b": seeded_uniform((1, 2, 2, 3, 3), seed + 1)}

    def fn(d):
        return GradPair(elem_add(d["a"], d["b"]), lambda g: {"a": g, "b": g})

    return check_gradients("elem_add", fn, inputs, tolerance=1e-10, seed=seed)


def _check_channel_mul(seed):
    inputs = {"o": seeded_uniform((2, 3, 2, 3, 3), seed), "u": seeded_uniform((2, 3), seed + 1)}

    def fn(d):
        o, u = d["o"], d["u"]
        return GradPair(channel_broadcast_mul(o, u),
                        lambda g: {"o": channel_broadcast_mul(g, u), "u": (g * o).sum(axis=(2, 3, 4))})

    return check_gradients("channel_broadcast_mul", fn, inputs, seed=seed)


def _conv_check(name, seed, x_shape, co, kernel, stride, padding):
    rng = np.random.default_rng(seed)
    p = _conv_params(rng, co, x_shape[1], kernel, stride, padding)
    inputs = {"x": seeded_uniform(x_shape, seed + 1), "weight": p.weight, "bias": p.bias}

    def fn(d):
        gp = ops.conv3d(d["x"], p)
        return GradPair(gp.value, lambda g: (lambda cg: {"x": cg.dx, "weight": cg.dw, "bias": cg.db})(gp.pullback(g)))

    return check_gradients(name, fn, inputs, seed=seed)


def _check_conv3d(seed):
    return _conv_check("conv3d", seed, (1, 2, 2, 4, 4), 2, (3, 3, 3), 1, 1)


def _check_conv3d_strided(seed):
    return _conv_check("conv3d_strided", seed, (1, 2, 3, 6, 6), 2, (3, 3, 3), (1, 2, 2), 1)


def _check_conv2d(seed):
    return _conv_check("conv2d", seed, (2, 2, 1, 5, 5), 3, (1, 3, 3), (1, 2, 2), (0, 1, 1))


def _check_maxpool(seed):
    inputs = {"x": seeded_uniform((1, 2, 3, 4, 4), seed)}

    def fn(d):
        gp = ops.maxpool3d(d["x"])
        return GradPair(gp.value, lambda g: {"x": gp.pullback(g)})

    return check_gradients("maxpool3d", fn, inputs, seed=seed)


def _check_gap(seed):
    inputs = {"o": seeded_uniform((2, 3, 2, 3, 3), seed)}

    def fn(d):
        gp = ops.global_avg_pool(d["o"])
        return GradPair(gp.value, lambda g: {"o": gp.pullback(g)})

    return check_gradients("global_avg_pool", fn, inputs, seed=seed)


def _unary_check(name, op, seed):
    inputs = {"x": seeded_uniform((1, 2, 2, 3, 3), seed, -3, 3)}

    def fn(d):
        gp = op(d["x"])
        return GradPair(gp.value, lambda g: {"x": gp.pullback(g)})

    return check_gradients(name, fn, inputs, seed=seed)


def _check_relu(seed):
    return _unary_check("relu", ops.relu, seed)


def _check_sigmoid(seed):
    return _unary_check("sigmoid", ops.sigmoid, seed)


def _check_gate(seed):
    rng = np.random.default_rng(seed)
    p = random_block(rng, 8, 4, scale=1.0)
    inputs = {"o": seeded_uniform((2, 8, 2, 3, 3), seed + 1)}
    _bind({k: v for k, v in p.named_params().items() if k.startswith("gate")}, inputs)

    def fn(d):
        gp = channel_gate(d["o"], p)

        def pb(g):
            do, grads = gp.pullback(g)
            return {"o": do, **grads}

        return GradPair(gp.value, pb)

    return check_gradients("channel_gate", fn, inputs, seed=seed)


def _block_check(name, seed, x_shape, downsample=False, global_context=True, flat=False):
    rng = np.random.default_rng(seed)
    p = random_block(rng, x_shape[1], 4, downsample, global_context, flat)
    inputs = {"x": seeded_uniform(x_shape, seed + 1)}
    _bind(p.named_params(), inputs)

    def fn(d):
        gp = tca_forward(d["x"], p)

        def pb(g):
            dx, grads = gp.pullback(g)
            return {"x": dx, **grads}

        return GradPair(gp.value, pb)

    return check_gradients(name, fn, inputs, seed=seed)


def _check_tca(seed):
    return _block_check("tca_block", seed, (1, 4, 2, 6, 6))


def _check_tca_no_gc(seed):
    return _block_check("tca_block_no_gc", seed, (1, 4, 2, 6, 6), global_context=False)


def _check_tca_down(seed):
    return _block_check("tca_block_downsample", seed, (1, 4, 2, 6, 6), downsample=True)


def _check_tca_2d(seed):
    return _block_check("tca2d_block", seed, (2, 4, 1, 6, 6), downsample=True, flat=True)


def tiny_net_config(variant="E3D", blocks=2, channels=4, in_channels=1, global_context=True) -> NetConfig:
    return NetConfig(variant=variant, in_channels=in_channels, stem_channels=channels, block_count=blocks,
                     downsample_blocks=(1,), reduction_ratio=4, global_context=global_context,
                     clip_length=2 if variant == "E3D" else 1)


def _net_check(name, seed, cfg, x_shape):
    net = build_network(cfg, seed=seed, dtype=np.float64)
    inputs = {"input": seeded_uniform(x_shape, seed + 1, 0.0, 1.0)}
    _bind(net.parameters(), inputs)

    def fn(d):
        return network_forward(d["input"], net, need_input_grad=True)

    return check_gradients(name, fn, inputs, seed=seed)


def _check_e3d(seed):
    return _net_check("e3d_2block", seed, tiny_net_config(), (1, 1, 2, 16, 16))


def _check_e2d(seed):
    return _net_check("e2d_2block", seed, tiny_net_config("E2D"), (1, 1, 1, 16, 16))


CHECKS: Dict[str, Callable[[int], GradCheckReport]] = {
    "elem_add": _check_elem_add,
    "channel_broadcast_mul": _check_channel_mul,
    "conv3d": _check_conv3d,
    "conv3d_strided": _check_conv3d_strided,
    "conv2d": _check_conv2d,
    "maxpool3d": _check_maxpool,
    "global_avg_pool": _check_gap,
    "relu": _check_relu,
    "sigmoid": _check_sigmoid,
    "channel_gate": _check_gate,
    "tca_block": _check_tca,
    "tca_block_no_gc": _check_tca_no_gc,
    "tca_block_downsample": _check_tca_down,
    "tca2d_block": _check_tca_2d,
    "e3d_2block": _check_e3d,
    "e2d_2block": _check_e2d,
}


def run_checks(names: Optional[List[str]] = None, seed: int = 0) -> List[GradCheckReport]:
    names = list(CHECKS) if names is None else names
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient check(s) {unknown}; known: {sorted(CHECKS)}")
    return [CHECKS[n](seed) for n in names]
