"""Counting metrics: MAE, the root-mean-square "MSE", and GAME(L)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .density import apply_roi
from .tensor import ShapeError


@dataclass(frozen=True)
class CountRecord:
    frame: int
    truth: float
    estimate: float


def count_of(m: np.ndarray, roi: Optional[np.ndarray] = None) -> float:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("density map has non-finite cells")
    return float(apply_roi(m, roi).sum())


def _errors(records: Sequence[CountRecord]) -> np.ndarray:
    if len(records) == 0:
        raise ValueError("no records to evaluate")
    return np.array([r.truth - r.estimate for r in records], dtype=np.float64)


def mae(records: Sequence[CountRecord]) -> float:
    return float(np.mean(np.abs(_errors(records))))


def mse(records: Sequence[CountRecord]) -> float:
    """Root of the mean squared count error (the crowd-counting "MSE")."""
    e = _errors(records)
    return float(np.sqrt(np.mean(e * e)))


def grid_edges(n: int, parts: int) -> List[int]:
    """Floor-sized cells; the last one absorbs the remainder."""
    step = n // parts
    if step == 0:
        raise ValueError(f"cannot split {n} pixels into {parts} non-empty cells")
    return [i * step for i in range(parts)] + [n]


def region_counts(m: np.ndarray, level: int) -> np.ndarray:
    """(2^L, 2^L) array of region sums of a 2D map."""
    if level < 0:
        raise ValueError("GAME level must be >= 0")
    parts = 2**level
    ys = grid_edges(m.shape[0], parts)
    xs = grid_edges(m.shape[1], parts)
    rows = np.add.reduceat(np.asarray(m, dtype=np.float64), ys[:-1], axis=0)
    return np.add.reduceat(rows, xs[:-1], axis=1)


def game_frame(pred: np.ndarray, gt: np.ndarray, level: int) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(f"GAME needs two equal 2D maps, got {pred.shape} and {gt.shape}")
    return float(np.abs(region_counts(pred, level) - region_counts(gt, level)).sum())


def game(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], level: int) -> float:
    scores = [game_frame(p, g, level) for p, g in zip(preds, gts, strict=True)]
    if not scores:
        raise ValueError("no frames to evaluate")
    return float(np.mean(scores))


def summarize(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], frames: Sequence[int],
              levels: Tuple[int, ...] = (0, 1, 2, 3)) -> dict:
    """JSON-ready report: per-frame records plus MAE, MSE and GAME per level.

    Levels whose grid would have empty cells on these maps are reported as None.
    """
    if len(preds) == 0:
        raise ValueError("no frames to evaluate")
    h, w = np.shape(gts[0])
    levels_ok = [L for L in levels if h >= 2**L and w >= 2**L]
    records = [CountRecord(int(f), count_of(g), count_of(p)) for f, p, g in zip(frames, preds, gts, strict=True)]
    per_frame = []
    for r, p, g in zip(records, preds, gts):
        per_frame.append({
            "frame": r.frame,
            "truth": r.truth,
            "estimate": r.estimate,
            "game": {str(L): game_frame(p, g, L) if L in levels_ok else None for L in levels},
        })
    return {
        "n_frames": len(records),
        "mae": mae(records),
        "mse": mse(records),
        "game": {
            str(L): float(np.mean([f["game"][str(L)] for f in per_frame])) if L in levels_ok else None
            for L in levels
        },
        "frames": per_frame,
    }
