"""TCA blocks and the E3D / E2D counting networks."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .ops import ConvParams, GradPair, conv3d, global_avg_pool, maxpool3d, relu, sigmoid
from .tensor import ShapeError, channel_broadcast_mul, elem_add

VARIANTS = ("E3D", "E2D")


def default_downsample_blocks(block_count: int, n_down: int = 3) -> Tuple[int, ...]:
    """1-based indices of the strided blocks.

    Plain blocks are interleaved after each downsampling block while they
    last, then appended; 8 blocks gives (1, 3, 5).
    """
    if block_count < n_down:
        raise ValueError(f"block_count {block_count} < {n_down} downsampling blocks")
    plain = block_count - n_down
    idx, pos = [], 1
    for i in range(n_down):
        idx.append(pos)
        pos += 1
        if i < n_down - 1 and plain > 0:
            pos += 1
            plain -= 1
    return tuple(idx)


@dataclass
class NetConfig:
    variant: str = "E3D"
    in_channels: int = 1
    stem_channels: int = 16
    block_count: int = 8
    downsample_blocks: Optional[Tuple[int, ...]] = None
    reduction_ratio: int = 4
    global_context: bool = True
    clip_length: int = 16

    def __post_init__(self):
        if self.downsample_blocks is None:
            self.downsample_blocks = default_downsample_blocks(self.block_count)
        self.downsample_blocks = tuple(sorted(int(i) for i in self.downsample_blocks))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("in_channels", "stem_channels", "block_count", "reduction_ratio", "clip_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        ds = self.downsample_blocks
        if len(set(ds)) != len(ds):
            raise ValueError(f"downsample_blocks has duplicates: {ds}")
        if len(ds) > self.block_count:
            raise ValueError("block_count must be >= number of downsampling blocks")
        if any(i < 1 or i > self.block_count for i in ds):
            raise ValueError(f"downsample_blocks {ds} outside 1..{self.block_count}")
        if self.stem_channels % self.reduction_ratio:
            raise ValueError(
                f"channel count {self.stem_channels} not divisible by reduction ratio {self.reduction_ratio}"
            )

    @property
    def output_stride(self) -> int:
        return 2 ** (1 + len(self.downsample_blocks))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["downsample_blocks"] = list(self.downsample_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if d.get("downsample_blocks") is not None:
            d["downsample_blocks"] = tuple(d["downsample_blocks"])
        return cls(**d)


@dataclass
class TcaBlockParams:
    conv1: ConvParams
    conv2: ConvParams
    gate_reduce: ConvParams
    gate_expand: ConvParams
    shortcut_proj: Optional[ConvParams] = None
    global_context: bool = True

    def __post_init__(self):
        c = self.conv1.in_channels
        if self.conv1.out_channels != c or self.conv2.in_channels != c or self.conv2.out_channels != c:
            raise ShapeError("conv1 and conv2 must preserve the channel count")
        if self.gate_reduce.in_channels != c or self.gate_expand.out_channels != c:
            raise ShapeError("gate layers must map c -> c/r -> c")
        if self.gate_reduce.out_channels != self.gate_expand.in_channels:
            raise ShapeError("gate hidden widths disagree")
        strided = self.conv1.stride != (1, 1, 1)
        if strided and self.shortcut_proj is None:
            raise ShapeError("downsampling block requires shortcut_proj")
        if not strided and self.shortcut_proj is not None:
            raise ShapeError("shortcut_proj given for a non-downsampling block")

    @property
    def channels(self) -> int:
        return self.conv1.in_channels

    @property
    def downsamples(self) -> bool:
        return self.shortcut_proj is not None

    def named_params(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in ("conv1", "conv2", "gate_reduce", "gate_expand", "shortcut_proj"):
            p = getattr(self, name)
            if p is None:
                continue
            out[f"{name}.weight"] = p.weight
            if p.bias is not None:
                out[f"{name}.bias"] = p.bias
        return out


@dataclass
class Network:
    config: NetConfig
    stem: ConvParams
    blocks: List[TcaBlockParams]
    head: ConvParams
    pool_size: Tuple[int, int, int] = (3, 3, 3)
    pool_pad: Tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.head.out_channels != 1:
            raise ShapeError("head must output exactly one channel")

    def parameters(self) -> Dict[str, np.ndarray]:
        """Parameter arrays by name, in declaration order (shared, not copied)."""
        out = {"stem.weight": self.stem.weight}
        if self.stem.bias is not None:
            out["stem.bias"] = self.stem.bias
        for i, blk in enumerate(self.blocks):
            for k, v in blk.named_params().items():
                out[f"blocks.{i}.{k}"] = v
        out["head.weight"] = self.head.weight
        if self.head.bias is not None:
            out["head.bias"] = self.head.bias
        return out

    @property
    def dtype(self):
        return self.stem.weight.dtype


def _init_conv(rng, c_out, c_in, kernel, stride, padding, dtype) -> ConvParams:
    fan_in = c_in * int(np.prod(kernel))
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, *kernel)).astype(dtype)
    return ConvParams(w, np.zeros(c_out, dtype=dtype), stride, padding)


def build_network(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> Network:
    cfg.validate()
    rng = np.random.default_rng(seed)
    flat = cfg.variant == "E2D"

    def k3(k):
        return (1, k, k) if flat else (k, k, k)

    def pad3(q):
        return (0, q, q) if flat else (q, q, q)

    c = cfg.stem_channels
    hidden = c // cfg.reduction_ratio
    stem = _init_conv(rng, c, cfg.in_channels, k3(7), (1, 2, 2), pad3(3), dtype)
    blocks = []
    for i in range(1, cfg.block_count + 1):
        down = i in cfg.downsample_blocks
        stride = (1, 2, 2) if down else (1, 1, 1)
        conv1 = _init_conv(rng, c, c, k3(3), stride, pad3(1), dtype)
        conv2 = _init_conv(rng, c, c, k3(3), (1, 1, 1), pad3(1), dtype)
        reduce_ = _init_conv(rng, hidden, c, (1, 1, 1), 1, 0, dtype)
        expand = _init_conv(rng, c, hidden, (1, 1, 1), 1, 0, dtype)
        proj = _init_conv(rng, c, c, (1, 1, 1), stride, 0, dtype) if down else None
        blocks.append(TcaBlockParams(conv1, conv2, reduce_, expand, proj, cfg.global_context))
    head = _init_conv(rng, 1, c, (1, 1, 1), 1, 0, dtype)
    return Network(cfg, stem, blocks, head, pool_size=k3(3), pool_pad=pad3(1))


def _conv_grads(prefix: str, p: ConvParams, grads, out: Dict[str, np.ndarray]) -> None:
    out[f"{prefix}.weight"] = grads.dw
    if p.bias is not None:
        out[f"{prefix}.bias"] = grads.db


def channel_gate(o: np.ndarray, p: TcaBlockParams) -> GradPair:
    """Per-item channel weights u (n, c) from pooled features of ``o``.

    Pullback maps du (n, c) to (do, {param name: grad}).
    """
    if o.shape[1] != p.channels:
        raise ShapeError(f"gate expects {p.channels} channels, got {o.shape[1]}")
    pooled = global_avg_pool(o)
    v = pooled.value[:, :, None, None, None]
    z1 = conv3d(v, p.gate_reduce)
    h = relu(z1.value)
    z2 = conv3d(h.value, p.gate_expand)
    s = sigmoid(z2.value)
    u = s.value[:, :, 0, 0, 0]

    def pullback(du: np.ndarray):
        grads: Dict[str, np.ndarray] = {}
        dz2 = s.pullback(du[:, :, None, None, None])
        g2 = z2.pullback(dz2)
        _conv_grads("gate_expand", p.gate_expand, g2, grads)
        g1 = z1.pullback(h.pullback(g2.dx))
        _conv_grads("gate_reduce", p.gate_reduce, g1, grads)
        do = pooled.pullback(g1.dx[:, :, 0, 0, 0])
        return do, grads

    return GradPair(u, pullback)


def tca_forward(x: np.ndarray, p: TcaBlockParams) -> GradPair:
    """One TCA block: gated two-conv branch plus (projected) shortcut.

    Pullback maps the output gradient to (dx, {param name: grad}).
    """
    if x.shape[1] != p.channels:
        raise ShapeError(f"block expects {p.channels} channels, got {x.shape[1]}")
    c1 = conv3d(x, p.conv1)
    r1 = relu(c1.value)
    c2 = conv3d(r1.value, p.conv2)
    o = c2.value
    gate = None
    if p.global_context:
        gate = channel_gate(o, p)
        o_tilde = channel_broadcast_mul(o, gate.value)
    else:
        o_tilde = o
    proj = conv3d(x, p.shortcut_proj) if p.shortcut_proj is not None else None
    shortcut = proj.value if proj is not None else x
    out = elem_add(shortcut, o_tilde)

    def pullback(g: np.ndarray):
        grads: Dict[str, np.ndarray] = {}
        if gate is not None:
            u = gate.value
            do = channel_broadcast_mul(g, u)
            du = (g * o).sum(axis=(2, 3, 4))
            do_gate, ggrads = gate.pullback(du)
            grads.update(ggrads)
            do = do + do_gate
        else:
            do = g
            for name in ("gate_reduce", "gate_expand"):
                gp_ = getattr(p, name)
                grads[f"{name}.weight"] = np.zeros_like(gp_.weight)
                if gp_.bias is not None:
                    grads[f"{name}.bias"] = np.zeros_like(gp_.bias)
        g2 = c2.pullback(do)
        g1 = c1.pullback(r1.pullback(g2.dx))
        if proj is not None:
            gp = proj.pullback(g)
            _conv_grads("shortcut_proj", p.shortcut_proj, gp, grads)
            dx = g1.dx + gp.dx
        else:
            dx = g1.dx + g
        _conv_grads("conv1", p.conv1, g1, grads)
        _conv_grads("conv2", p.conv2, g2, grads)
        return dx, grads

    return GradPair(out, pullback)


def check_input(x: np.ndarray, net: Network) -> None:
    if x.ndim != 5:
        raise ShapeError(f"network input must be (n, c, T, H, W), got {x.shape}")
    cfg = net.config
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects {cfg.in_channels}")
    s = cfg.output_stride
    h, w = x.shape[3:]
    if h < s or w < s or h % s or w % s:
        raise ShapeError(f"spatial dims {(h, w)} must be positive multiples of {s}")


def network_forward(x: np.ndarray, net: Network, need_input_grad: bool = False) -> GradPair:
    """Density maps (n, 1, T, H/s, W/s) for a clip, s = ``net.config.output_stride``.

    Pullback returns a dict of parameter gradients keyed like
    :meth:`Network.parameters`, plus ``"input"`` when requested.
    """
    check_input(x, net)
    x = x.astype(net.dtype, copy=False)
    stem = conv3d(x, net.stem, need_dx=need_input_grad)
    act = relu(stem.value)
    pool = maxpool3d(act.value, net.pool_size, (1, 1, 1), net.pool_pad)
    h = pool.value
    tapes = []
    for blk in net.blocks:
        t = tca_forward(h, blk)
        tapes.append(t)
        h = t.value
    head = conv3d(h, net.head)

    def pullback(g: np.ndarray) -> Dict[str, np.ndarray]:
        grads: Dict[str, np.ndarray] = {}
        gh = head.pullback(g)
        _conv_grads("head", net.head, gh, grads)
        dh = gh.dx
        for i in range(len(tapes) - 1, -1, -1):
            dh, bg = tapes[i].pullback(dh)
            for k, v in bg.items():
                grads[f"blocks.{i}.{k}"] = v
        gs = stem.pullback(act.pullback(pool.pullback(dh)))
        _conv_grads("stem", net.stem, gs, grads)
        if need_input_grad:
            grads["input"] = gs.dx
        order = list(net.parameters())
        ordered = {k: grads[k] for k in order}
        if need_input_grad:
            ordered["input"] = grads["input"]
        return ordered

    return GradPair(head.value, pullback)


def predict(x: np.ndarray, net: Network) -> np.ndarray:
    return network_forward(x, net).value
