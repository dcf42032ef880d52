"""Dense 5-axis tensors (n, c, d, h, w) backed by numpy arrays.

A 2D value is stored with d == 1, so the same layout serves the E3D and E2D
paths. Arrays are C-contiguous (w fastest) and never mutated by the
functions in this module.
"""
from __future__ import annotations

import functools
import io
import struct
from fractions import Fraction
from typing import BinaryIO, Sequence

import numpy as np

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sIB5I")


class ShapeError(ValueError):
    pass


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a contiguous float 5-axis array, validating rank."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 5:
        raise ShapeError(f"expected a 5-axis tensor (n, c, d, h, w), got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def zeros(shape: Sequence[int], dtype=np.float64) -> np.ndarray:
    if len(shape) != 5:
        raise ShapeError(f"expected 5 dims, got {tuple(shape)}")
    return np.zeros(tuple(shape), dtype=dtype)


def elem_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elem_add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def channel_broadcast_mul(o: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Scale channel ``c`` of ``o`` by ``u[c]``.

    ``u`` is either a length-c vector shared across the batch or an (n, c)
    matrix with one gate vector per batch item.
    """
    u = np.asarray(u, dtype=o.dtype)
    n, c = o.shape[:2]
    if u.ndim == 1:
        if u.shape[0] != c:
            raise ShapeError(f"gate length {u.shape[0]} != channel count {c}")
        u = np.broadcast_to(u, (n, c))
    elif u.shape != (n, c):
        raise ShapeError(f"gate shape {u.shape} != {(n, c)}")
    if not np.all(np.isfinite(u)):
        raise ValueError("channel weights must be finite")
    return o * u[:, :, None, None, None]


def _as_fraction(f) -> Fraction:
    if isinstance(f, Fraction):
        return f
    if isinstance(f, float):
        return Fraction(f).limit_denominator(1 << 16)
    return Fraction(f)


def resize_matrix(n_in: int, factor) -> np.ndarray:
    return _resize_matrix(n_in, _as_fraction(factor)).copy()


@functools.lru_cache(maxsize=64)
def _resize_matrix(n_in: int, factor: Fraction) -> np.ndarray:
    """Weights (n_out, n_in) of a half-pixel aligned triangle-filter resampler.

    Upscaling is plain linear interpolation with edge clamping. Downscaling
    widens the triangle to the input spacing so every input pixel is
    covered; clamped out-of-range taps fold back onto the edge pixel.
    """
    if factor <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    n_out = int(round(n_in * factor))
    if n_out < 1:
        raise ValueError(f"resize of {n_in} by {factor} gives an empty axis")
    scale = 1 / factor
    support = max(Fraction(1), scale)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        centre = (i + Fraction(1, 2)) * scale  # in input coordinates, pixel j spans [j, j+1)
        lo = int(np.floor(float(centre - support - 1)))
        hi = int(np.ceil(float(centre + support + 1)))
        total = Fraction(0)
        taps = {}
        for j in range(lo, hi + 1):
            t = abs(j + Fraction(1, 2) - centre) / support
            if t >= 1:
                continue
            w = 1 - t
            jj = min(max(j, 0), n_in - 1)
            taps[jj] = taps.get(jj, 0) + w
            total += w
        for jj, w in taps.items():
            mat[i, jj] = float(w / total)
    return mat


def bilinear_resize(x: np.ndarray, factor) -> np.ndarray:
    """Resize the h and w axes of a 5-axis tensor by ``factor``.

    ``factor`` is a scalar or an (fh, fw) pair. Depth is untouched.
    """
    if np.ndim(factor) == 0:
        fh = fw = factor
    else:
        fh, fw = factor
    h, w = x.shape[-2:]
    rh = _resize_matrix(h, _as_fraction(fh)).astype(x.dtype)
    rw = _resize_matrix(w, _as_fraction(fw)).astype(x.dtype)
    return np.ascontiguousarray(rh @ x @ rw.T)


def write_dmap(f: BinaryIO, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeError(f"DMAP stores 5-axis tensors, got shape {x.shape}")
    le = x.astype(x.dtype.newbyteorder("<"), copy=False)
    code = _DTYPE_CODES.get(le.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {x.dtype}")
    f.write(_HEADER.pack(DMAP_MAGIC, DMAP_VERSION, code, *x.shape))
    f.write(np.ascontiguousarray(le).tobytes())


def read_dmap(f: BinaryIO) -> np.ndarray:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated DMAP header")
    magic, version, code, *dims = _HEADER.unpack(head)
    if magic != DMAP_MAGIC:
        raise ValueError(f"bad DMAP magic {magic!r}")
    if version != DMAP_VERSION:
        raise ValueError(f"unsupported DMAP version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown DMAP dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims))
    raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("truncated DMAP payload")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def save_dmap(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_dmap(f, x)


def load_dmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_dmap(f)


def dmap_bytes(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_dmap(buf, x)
    return buf.getvalue()
