"""8-bit heatmap rendering of density maps."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


def to_uint8(m: np.ndarray) -> np.ndarray:
    """Scale a 2D map so its maximum becomes 255; non-positive maps render black."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("cannot render a map with non-finite cells")
    peak = m.max()
    if peak <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.clip(np.rint(np.clip(m, 0, None) / peak * 255.0), 0, 255).astype(np.uint8)


def render_map(m: np.ndarray, path, scale: int = 1) -> Path:
    img = Image.fromarray(to_uint8(m), mode="L")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)
    return Path(path)


def render_montage(maps: Sequence[np.ndarray], path, gap: int = 2, scale: int = 1) -> Path:
    """Side-by-side panels (e.g. GT then prediction), each normalised on its own."""
    panels = [to_uint8(m) for m in maps]
    h = max(p.shape[0] for p in panels)
    w = sum(p.shape[1] for p in panels) + gap * (len(panels) - 1)
    canvas = np.zeros((h, w), dtype=np.uint8)
    x = 0
    for p in panels:
        canvas[: p.shape[0], x : x + p.shape[1]] = p
        x += p.shape[1] + gap
    img = Image.fromarray(canvas, mode="L")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)
    return Path(path)
