"""Ground-truth density maps from head annotations.

Points are (x, y) in continuous pixel coordinates: pixel (row r, col c)
covers [c, c+1) x [r, r+1) and has its centre at (c + 0.5, r + 0.5).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import ShapeError, bilinear_resize

log = logging.getLogger(__name__)

TRUNCATE = 4.0
GT_FACTOR = 16


@dataclass(frozen=True)
class KernelPolicy:
    """How heads are blurred: one fixed sigma, or k-NN adaptive sigmas.

    ``fallback_sigma`` is used by the adaptive policy for frames with fewer
    than two heads.
    """

    kind: str = "fixed"
    sigma: float = 4.0
    k: int = 3
    beta: float = 0.3
    fallback_sigma: float = 4.0

    def __post_init__(self):
        if self.kind not in ("fixed", "adaptive"):
            raise ValueError(f"kernel kind must be 'fixed' or 'adaptive', got {self.kind!r}")
        if self.sigma <= 0 or self.fallback_sigma <= 0:
            raise ValueError("kernel sigmas must be positive")
        if self.k < 1 or self.beta <= 0:
            raise ValueError("adaptive kernel needs k >= 1 and beta > 0")

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "sigma": self.sigma}
        return {"kind": "adaptive", "k": self.k, "beta": self.beta, "fallback_sigma": self.fallback_sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelPolicy":
        known = set(asdict(cls()).keys())
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown kernel fields {sorted(extra)}")
        return cls(**d)


UCSD_KERNEL = KernelPolicy("fixed", sigma=4.0)
WORLDEXPO_KERNEL = KernelPolicy("fixed", sigma=3.0)
TRANCOS_KERNEL = KernelPolicy("fixed", sigma=4.0)
MALL_KERNEL = KernelPolicy("adaptive", k=3, beta=0.3)


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 2))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"points must be an (N, 2) array of (x, y), got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def clamp_points(points, h: int, w: int) -> Tuple[np.ndarray, int]:
    """Clamp into [0, w) x [0, h); returns the clamped points and how many moved."""
    pts = as_points(points)
    hi = np.array([np.nextafter(w, 0), np.nextafter(h, 0)])
    out = np.clip(pts, 0.0, hi)
    moved = int(np.count_nonzero(np.any(out != pts, axis=1)))
    if moved:
        log.warning("clamped %d out-of-bounds annotation(s) into %dx%d", moved, w, h)
    return out, moved


def adaptive_sigmas(points, k: int = 3, beta: float = 0.3) -> np.ndarray:
    """sigma_i = beta * mean distance to the min(k, N-1) nearest other heads."""
    pts = as_points(points)
    n = len(pts)
    if n < 2:
        raise ValueError("adaptive sigmas need at least two points")
    if k < 1 or beta <= 0:
        raise ValueError("need k >= 1 and beta > 0")
    kk = min(k, n - 1)
    dx = pts[:, None, 0] - pts[None, :, 0]
    dy = pts[:, None, 1] - pts[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    np.fill_diagonal(dist, np.inf)
    near = np.sort(dist, axis=1)[:, :kk]
    total = near[:, 0].copy()
    for j in range(1, kk):
        total += near[:, j]
    return beta * (total / kk)


def _axis_weights(frac: float, sigma: float, radius: int, base: int, size: int):
    offs = np.arange(-radius, radius + 1)
    d = offs + 0.5 - frac
    two_var = 2.0 * sigma * sigma
    if two_var == 0.0:  # sigma so small its variance underflows; caller falls back
        g = np.zeros(len(offs))
    else:
        with np.errstate(over="ignore"):
            g = np.exp(-(d * d) / two_var)
    idx = base + offs
    keep = (idx >= 0) & (idx < size)
    return idx[keep], g[keep]


def render_density(points, sigmas: Union[float, Sequence[float], np.ndarray], h: int, w: int) -> np.ndarray:
    """Sum of per-head truncated Gaussians, each renormalised to unit mass in-image.

    ``sigmas`` is one value for all heads or one per head.
    """
    pts = as_points(points)
    out = np.zeros((h, w), dtype=np.float64)
    if len(pts) == 0:
        return out
    sig = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (len(pts),))
    if np.any(~(sig > 0)):
        raise ValueError("all sigmas must be > 0")
    for (x, y), s in zip(pts, sig):
        ix, iy = math.floor(x), math.floor(y)
        radius = int(math.ceil(TRUNCATE * s))
        cols, gx = _axis_weights(x - ix, s, radius, ix, w)
        rows, gy = _axis_weights(y - iy, s, radius, iy, h)
        sx, sy = gx.sum(), gy.sum()
        if sx == 0 or sy == 0:
            # kernel underflowed entirely; deposit on the nearest pixel
            out[min(max(iy, 0), h - 1), min(max(ix, 0), w - 1)] += 1.0
            continue
        out[np.ix_(rows, cols)] += np.outer(gy / sy, gx / sx)
    return out


def sigmas_for(points, policy: KernelPolicy) -> Union[float, np.ndarray]:
    pts = as_points(points)
    if policy.kind == "fixed":
        return policy.sigma
    if len(pts) < 2:
        return policy.fallback_sigma
    return adaptive_sigmas(pts, policy.k, policy.beta)


def density_map(points, policy: KernelPolicy, h: int, w: int) -> np.ndarray:
    pts = as_points(points)
    if len(pts) == 0:
        return np.zeros((h, w))
    return render_density(pts, sigmas_for(pts, policy), h, w)


def apply_roi(m: np.ndarray, roi: Optional[np.ndarray]) -> np.ndarray:
    """Zero every cell outside ``roi``; the mask broadcasts over leading axes."""
    if roi is None:
        return m
    roi = np.asarray(roi).astype(bool)
    if m.shape[-2:] != roi.shape:
        raise ShapeError(f"ROI shape {roi.shape} != map spatial shape {m.shape[-2:]}")
    return np.where(roi, m, 0).astype(m.dtype, copy=False)


def downscale_roi(roi: np.ndarray, factor: int = GT_FACTOR) -> np.ndarray:
    """Block-downscale a binary mask: a cell is inside iff >= half its pixels are."""
    roi = np.asarray(roi).astype(bool)
    h, w = roi.shape
    if h % factor or w % factor:
        raise ShapeError(f"ROI dims {(h, w)} not divisible by {factor}")
    cover = roi.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return cover >= 0.5


def downscale_gt(m: np.ndarray, factor: int = GT_FACTOR) -> np.ndarray:
    """Resize an (..., H, W) density map by 1/factor and rescale by factor**2 to keep the count."""
    m = np.asarray(m)
    h, w = m.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"density dims {(h, w)} not divisible by {factor}")
    lead = m.shape[:-2]
    x = m.reshape((1, 1, -1, h, w))
    small = bilinear_resize(x, (1 / factor, 1 / factor)) * float(factor * factor)
    return small.reshape(lead + small.shape[-2:])
