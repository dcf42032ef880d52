"""Differentiable primitives with hand-written backward passes.

Every forward function returns a :class:`GradPair`: the output array plus a
``pullback`` closure mapping an upstream gradient (same shape as the output)
to gradients of the inputs. Convolutions are direct im2col products; the
flattened reduction axis is ordered (ci, kd, kh, kw).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError

Triple = Tuple[int, int, int]


@dataclass
class GradPair:
    value: np.ndarray
    pullback: Callable[[np.ndarray], Any] = field(repr=False)

    def backward(self, g: np.ndarray):
        g = np.asarray(g)
        if g.shape != np.shape(self.value):
            raise ShapeError(f"upstream gradient shape {g.shape} != output shape {np.shape(self.value)}")
        return self.pullback(g)


def _triple(v) -> Triple:
    if np.ndim(v) == 0:
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass
class ConvParams:
    """Weights (c_out, c_in, kd, kh, kw), optional bias (c_out,), stride, zero padding."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.weight.ndim != 5:
            raise ShapeError(f"conv weight must be 5-axis, got {self.weight.shape}")
        if min(self.weight.shape) < 1:
            raise ValueError(f"kernel dims must be >= 1, got {self.weight.shape}")
        if min(self.stride) < 1:
            raise ValueError(f"strides must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> Triple:
        return tuple(self.weight.shape[2:])


@dataclass
class ConvGrads:
    dx: Optional[np.ndarray]
    dw: np.ndarray
    db: Optional[np.ndarray]


def conv_output_shape(in_shape, p: ConvParams) -> tuple:
    n, c = in_shape[:2]
    if c != p.in_channels:
        raise ShapeError(f"input has {c} channels, conv expects {p.in_channels}")
    dims = []
    for size, k, s, pad in zip(in_shape[2:], p.kernel, p.stride, p.padding):
        if size + 2 * pad < k:
            raise ShapeError(f"kernel {p.kernel} larger than padded input {in_shape[2:]} (pad {p.padding})")
        dims.append((size + 2 * pad - k) // s + 1)
    return (n, p.out_channels, *dims)


def _pad(x: np.ndarray, pad: Triple, value=0.0) -> np.ndarray:
    if not any(pad):
        return x
    widths = ((0, 0), (0, 0)) + tuple((q, q) for q in pad)
    return np.pad(x, widths, mode="constant", constant_values=value)


def _windows(xp: np.ndarray, kernel: Triple, stride: Triple, out_dims) -> np.ndarray:
    v = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    sd, sh, sw = stride
    od, oh, ow = out_dims
    return v[:, :, : od * sd : sd, : oh * sh : sh, : ow * sw : sw]


def _scatter_windows(cols: np.ndarray, padded_shape, kernel: Triple, stride: Triple) -> np.ndarray:
    """Adjoint of :func:`_windows`; ``cols`` is (n, c, od, oh, ow, kd, kh, kw)."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    od, oh, ow = cols.shape[2:5]
    sd, sh, sw = stride
    kd, kh, kw = kernel
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                out[:, :, a : a + od * sd : sd, b : b + oh * sh : sh, c : c + ow * sw : sw] += cols[..., a, b, c]
    return out


def conv3d(x: np.ndarray, p: ConvParams, need_dx: bool = True) -> GradPair:
    """Direct 3D convolution (cross-correlation) with zero padding.

    The pullback returns :class:`ConvGrads`; ``dx`` is None when ``need_dx``
    is False (e.g. for the network input).
    """
    out_shape = conv_output_shape(x.shape, p)
    n, co, od, oh, ow = out_shape
    ci = p.in_channels
    kd, kh, kw = p.kernel
    xp = _pad(x, p.padding)
    win = _windows(xp, p.kernel, p.stride, (od, oh, ow))
    # (n, od, oh, ow, ci, kd, kh, kw) -> rows are output positions
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * od * oh * ow, ci * kd * kh * kw)
    wmat = p.weight.reshape(co, -1)
    out = cols @ wmat.T
    if p.bias is not None:
        out += p.bias
    out = np.ascontiguousarray(out.reshape(n, od, oh, ow, co).transpose(0, 4, 1, 2, 3))

    def pullback(g: np.ndarray) -> ConvGrads:
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, co)
        dw = (g2.T @ cols).reshape(p.weight.shape)
        db = g.sum(axis=(0, 2, 3, 4)) if p.bias is not None else None
        dx = None
        if need_dx:
            dcols = (g2 @ wmat).reshape(n, od, oh, ow, ci, kd, kh, kw).transpose(0, 4, 1, 2, 3, 5, 6, 7)
            dxp = _scatter_windows(dcols, xp.shape, p.kernel, p.stride)
            pd, ph, pw = p.padding
            dx = np.ascontiguousarray(
                dxp[:, :, pd : pd + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]]
            )
        return ConvGrads(dx, dw, db)

    return GradPair(out, pullback)


def conv_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    return conv3d(x, p).value


def conv_backward(g: np.ndarray, saved: GradPair) -> ConvGrads:
    return saved.backward(g)


def maxpool3d(x: np.ndarray, size=(3, 3, 3), stride=(1, 1, 1), pad=(1, 1, 1)) -> GradPair:
    """Max pooling with -inf padding; ties resolve to the first window element."""
    size, stride, pad = _triple(size), _triple(stride), _triple(pad)
    if any(q >= k for q, k in zip(pad, size)):
        raise ValueError(f"padding {pad} must be smaller than window {size}")
    dims = []
    for d, k, s, q in zip(x.shape[2:], size, stride, pad):
        if d + 2 * q < k:
            raise ShapeError(f"pool window {size} larger than padded input {x.shape[2:]}")
        dims.append((d + 2 * q - k) // s + 1)
    xp = _pad(x, pad, value=-np.inf)
    od, oh, ow = dims
    sd, sh, sw = stride

    def tap(arr, a, b, c):
        return arr[:, :, a : a + od * sd : sd, b : b + oh * sh : sh, c : c + ow * sw : sw]

    offsets = [(a, b, c) for a in range(size[0]) for b in range(size[1]) for c in range(size[2])]
    out = np.full(x.shape[:2] + tuple(dims), -np.inf, dtype=x.dtype)
    idx = np.zeros(out.shape, dtype=np.int32)
    for k, (a, b, c) in enumerate(offsets):
        v = tap(xp, a, b, c)
        better = v > out  # strict: the first maximum in scan order wins
        np.copyto(out, v, where=better)
        idx[better] = k

    def pullback(g: np.ndarray) -> np.ndarray:
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for k, (a, b, c) in enumerate(offsets):
            tap(dxp, a, b, c)[...] += np.where(idx == k, g, 0)
        return np.ascontiguousarray(
            dxp[:, :, pad[0] : pad[0] + x.shape[2], pad[1] : pad[1] + x.shape[3], pad[2] : pad[2] + x.shape[4]]
        )

    return GradPair(np.ascontiguousarray(out), pullback)


def global_avg_pool(o: np.ndarray) -> GradPair:
    """Per-item channel means over (d, h, w); value has shape (n, c)."""
    vol = int(np.prod(o.shape[2:]))
    if vol < 1:
        raise ShapeError(f"global average pool over an empty volume {o.shape}")
    v = o.mean(axis=(2, 3, 4))

    def pullback(g: np.ndarray) -> np.ndarray:
        return np.broadcast_to((g / vol)[:, :, None, None, None], o.shape).copy()

    return GradPair(v, pullback)


def relu(x: np.ndarray) -> GradPair:
    mask = x > 0
    return GradPair(np.where(mask, x, 0).astype(x.dtype, copy=False), lambda g: g * mask)


def sigmoid(x: np.ndarray) -> GradPair:
    s = expit(x)
    return GradPair(s, lambda g: g * s * (1 - s))
