"""Dataset manifests, clip windowing and a synthetic moving-crowd generator."""
from __future__ import annotations

import functools
import json
import logging
import math
from collections.abc import Sequence as SequenceABC
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .density import GT_FACTOR, KernelPolicy, apply_roi, as_points, clamp_points, density_map, downscale_gt, downscale_roi
from .tensor import bilinear_resize

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


# -- images ------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Load an 8-bit PGM/PNG as float (c, H, W) in [0, 1]; grey gives c=1, colour c=3."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def image_size(path) -> Tuple[int, int]:
    """(height, width) read from the header only."""
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_gray(path, arr: np.ndarray) -> None:
    """Write a 2D array with values in [0, 1] as an 8-bit image (format from suffix)."""
    a = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path)


# -- manifest ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    frames: List[str]
    points: List[np.ndarray]
    roi: Optional[str] = None
    kernel: KernelPolicy = field(default_factory=KernelPolicy)
    resize: float = 1.0
    fps: Optional[float] = None
    root: Path = field(default=Path("."), compare=False)

    def __len__(self) -> int:
        return len(self.frames)

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        return {
            "frames": list(self.frames),
            "points": [[[float(x), float(y)] for x, y in pts] for pts in self.points],
            "roi": self.roi,
            "kernel": self.kernel.to_dict(),
            "resize": self.resize,
            "fps": self.fps,
        }


def dump_manifest(m: DatasetManifest) -> str:
    """Manifest JSON with one frame's annotations per line."""
    d = m.to_dict()
    lines = ["{"]
    lines.append(f'  "frames": {json.dumps(d["frames"])},')
    pts = d["points"]
    lines.append('  "points": [')
    for i, p in enumerate(pts):
        lines.append("    " + json.dumps(p) + ("," if i < len(pts) - 1 else ""))
    lines.append("  ],")
    lines.append(f'  "roi": {json.dumps(d["roi"])},')
    lines.append(f'  "kernel": {json.dumps(d["kernel"])},')
    lines.append(f'  "resize": {json.dumps(d["resize"])},')
    lines.append(f'  "fps": {json.dumps(d["fps"])}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_manifest(m: DatasetManifest, path) -> None:
    Path(path).write_text(dump_manifest(m))


def _points_line_numbers(text: str) -> List[int]:
    """Line number of each element of the top-level "points" array (best effort)."""
    dec = json.JSONDecoder()
    key = text.find('"points"')
    if key < 0:
        return []
    pos = text.find("[", key)
    lines, pos = [], pos + 1
    while pos < len(text):
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            break
        lines.append(text.count("\n", 0, pos) + 1)
        try:
            _, pos = dec.raw_decode(text, pos)
        except json.JSONDecodeError:
            break
    return lines


def _parse_points(entry, frame: int, where: str) -> np.ndarray:
    if not isinstance(entry, list):
        raise ManifestError(f"points[{frame}] ({where}): expected a list of [x, y] pairs")
    for j, p in enumerate(entry):
        if (
            not isinstance(p, list)
            or len(p) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)
            or not all(math.isfinite(v) for v in p)
        ):
            raise ManifestError(f"points[{frame}][{j}] ({where}): malformed annotation {p!r}")
    return as_points(entry)


def parse_manifest(text: str, root: Path = Path("."), check_files: bool = True) -> DatasetManifest:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e.msg} at line {e.lineno} column {e.colno}") from e
    if not isinstance(d, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(d) - {"frames", "points", "roi", "kernel", "resize", "fps"}
    if unknown:
        raise ManifestError(f"unknown manifest keys {sorted(unknown)}")
    frames = d.get("frames")
    if not isinstance(frames, list) or not frames:
        raise ManifestError("manifest needs a non-empty 'frames' list")
    raw_pts = d.get("points")
    if not isinstance(raw_pts, list) or len(raw_pts) != len(frames):
        n = len(raw_pts) if isinstance(raw_pts, list) else "missing"
        raise ManifestError(f"'points' must have one entry per frame ({len(frames)} frames, got {n})")
    line_no = _points_line_numbers(text)
    points = []
    for i, entry in enumerate(raw_pts):
        where = f"line {line_no[i]}" if i < len(line_no) else "line ?"
        points.append(_parse_points(entry, i, where))
    try:
        kernel = KernelPolicy.from_dict(d.get("kernel") or {"kind": "fixed", "sigma": 4.0})
    except (TypeError, ValueError) as e:
        raise ManifestError(f"bad kernel entry: {e}") from e
    resize = float(d.get("resize", 1.0))
    if resize <= 0:
        raise ManifestError("resize must be > 0")
    m = DatasetManifest(frames, points, d.get("roi"), kernel, resize, d.get("fps"), root)
    if check_files:
        _validate_files(m)
    return m


def _validate_files(m: DatasetManifest) -> None:
    missing = [f for f in m.frames if not m.path(f).is_file()]
    if missing:
        raise ManifestError(f"{len(missing)} missing frame file(s), first: {missing[0]}")
    if m.roi is not None and not m.path(m.roi).is_file():
        raise ManifestError(f"missing ROI file {m.roi}")
    size = image_size(m.path(m.frames[0]))
    total = 0
    for i, f in enumerate(m.frames):
        s = image_size(m.path(f)) if i else size
        if s != size:
            raise ManifestError(f"frame {f} is {s}, expected {size} like the first frame")
        m.points[i], moved = clamp_points(m.points[i], *size)
        total += moved
    if total:
        log.warning("manifest: %d annotation(s) clamped in total", total)
    if m.roi is not None:
        roi = read_mask(m.path(m.roi))
        if roi.shape != size:
            raise ManifestError(f"ROI is {roi.shape}, frames are {size}")
        if not roi.any():
            raise ManifestError("ROI mask is empty")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    return parse_manifest(path.read_text(), path.parent, check_files)


# -- preprocessing -----------------------------------------------------------

def crop_box(h: int, w: int, multiple: int = GT_FACTOR) -> Tuple[int, int, int, int]:
    """Centre crop (top, left, height, width) to multiples of ``multiple``."""
    ch, cw = (h // multiple) * multiple, (w // multiple) * multiple
    if ch == 0 or cw == 0:
        raise ManifestError(f"frame {h}x{w} smaller than {multiple}px after resizing")
    return (h - ch) // 2, (w - cw) // 2, ch, cw


class FrameStore:
    """Resized, cropped frames and their targets, cached per frame index."""

    def __init__(self, manifest: DatasetManifest, cache_size: int = 64):
        self.m = manifest
        h0, w0 = image_size(manifest.path(manifest.frames[0]))
        f = manifest.resize
        self.resized = (int(round(h0 * f)), int(round(w0 * f)))
        self.box = crop_box(*self.resized)
        self.roi = self._load_roi()
        self.roi_small = downscale_roi(self.roi) if self.roi is not None else None
        self.frame = functools.lru_cache(maxsize=cache_size)(self._frame)
        self.target = functools.lru_cache(maxsize=cache_size * 4)(self._target)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.box[2], self.box[3]

    def _resize(self, arr: np.ndarray) -> np.ndarray:
        if self.m.resize == 1.0:
            return arr
        return bilinear_resize(arr[None, :, None], self.m.resize)[0, :, 0]

    def _crop(self, arr: np.ndarray) -> np.ndarray:
        t, l, h, w = self.box
        return arr[..., t : t + h, l : l + w]

    def _load_roi(self) -> Optional[np.ndarray]:
        if self.m.roi is None:
            return None
        roi = read_mask(self.m.path(self.m.roi)).astype(np.float64)[None]
        return self._crop(self._resize(roi))[0] >= 0.5

    def _frame(self, i: int) -> np.ndarray:
        img = self._crop(self._resize(read_image(self.m.path(self.m.frames[i]))))
        if self.roi is not None:
            img = img * self.roi
        return img

    def points(self, i: int) -> np.ndarray:
        """Annotations in cropped-input coordinates; heads cropped away are dropped."""
        t, l, h, w = self.box
        pts = as_points(self.m.points[i]) * self.m.resize - np.array([l, t])
        keep = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        return pts[keep]

    def density(self, i: int) -> np.ndarray:
        h, w = self.shape
        return apply_roi(density_map(self.points(i), self.m.kernel, h, w), self.roi)

    def _target(self, i: int) -> np.ndarray:
        return apply_roi(downscale_gt(self.density(i)), self.roi_small)


# -- windows -----------------------------------------------------------------

@dataclass
class ClipSample:
    input: np.ndarray  # (1, c, T, H, W)
    targets: np.ndarray  # (1, 1, T, H/16, W/16)
    roi_small: np.ndarray  # (H/16, W/16) bool
    frame_indices: Tuple[int, ...]
    counted: Tuple[bool, ...]  # frames this window is credited with during evaluation


def window_starts(n_frames: int, t: int, stride: Optional[int] = None, mode: str = "train") -> List[int]:
    """Window start indices.

    ``train``: overlapping windows every ``stride`` frames. ``eval``:
    non-overlapping tiling, with a final right-aligned window when T does
    not divide the sequence.
    """
    if t < 1:
        raise ValueError("clip length must be >= 1")
    if t > n_frames:
        raise ValueError(f"clip length {t} exceeds sequence length {n_frames}")
    if mode == "train":
        stride = t if stride is None else stride
        if stride < 1:
            raise ValueError("window stride must be >= 1")
        return list(range(0, n_frames - t + 1, stride))
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    starts = list(range(0, n_frames - t + 1, t))
    if starts[-1] + t < n_frames:
        starts.append(n_frames - t)
    return starts


class WindowSequence(SequenceABC):
    """Lazily materialised clips over a :class:`FrameStore`."""

    def __init__(self, store: FrameStore, t: int, starts: List[int], mode: str):
        self.store, self.t, self.starts, self.mode = store, t, starts, mode

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        s = self.starts[k]
        idx = tuple(range(s, s + self.t))
        if self.mode == "eval" and k > 0:
            prev_end = self.starts[k - 1] + self.t
            counted = tuple(i >= prev_end for i in idx)
        else:
            counted = (True,) * self.t
        clip = np.stack([self.store.frame(i) for i in idx], axis=1)[None].astype(np.float32)
        targets = np.stack([self.store.target(i) for i in idx])[None, None]
        h, w = self.store.shape
        roi_small = self.store.roi_small
        if roi_small is None:
            roi_small = np.ones((h // GT_FACTOR, w // GT_FACTOR), dtype=bool)
        return ClipSample(clip, targets, roi_small, idx, counted)


def make_windows(manifest: DatasetManifest, t: int, stride_frames: Optional[int] = None,
                 mode: str = "train", store: Optional[FrameStore] = None) -> WindowSequence:
    store = store or FrameStore(manifest)
    return WindowSequence(store, t, window_starts(len(manifest), t, stride_frames, mode), mode)


# -- synthetic data ----------------------------------------------------------

@dataclass
class SynthConfig:
    seed: int = 0
    num_frames: int = 16
    height: int = 64
    width: int = 64
    min_people: int = 10
    max_people: int = 30
    max_displacement: float = 1.0
    blob_sigma: float = 1.5
    perspective: float = 0.0  # blob sigma grows by (1 + perspective) from top row to bottom row
    background: float = 0.05
    fps: float = 10.0
    kernel: KernelPolicy = field(default_factory=lambda: KernelPolicy("fixed", sigma=4.0))

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            self.kernel = KernelPolicy.from_dict(self.kernel)
        self.validate()

    def validate(self) -> None:
        if self.height % GT_FACTOR or self.width % GT_FACTOR or self.height < 16 or self.width < 16:
            raise ValueError(f"synthetic dims {(self.height, self.width)} must be positive multiples of 16")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if not 0 <= self.min_people <= self.max_people:
            raise ValueError("need 0 <= min_people <= max_people")
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")
        if self.blob_sigma <= 0 or self.perspective < 0:
            raise ValueError("blob_sigma must be > 0 and perspective >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def _reflect(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    r = np.mod(v - lo, 2 * span)
    return lo + np.where(r > span, 2 * span - r, r)


def render_blobs(points: np.ndarray, h: int, w: int, sigma: float, perspective: float = 0.0,
                 background: float = 0.0) -> np.ndarray:
    img = np.full((h, w), background, dtype=np.float64)
    if len(points) == 0:
        return img
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    for x, y in points:
        s = sigma * (1.0 + perspective * y / h)
        gy = np.exp(-((ys - y) ** 2) / (2 * s * s))
        gx = np.exp(-((xs - x) ** 2) / (2 * s * s))
        img += (1.0 - background) * np.outer(gy, gx)
    return np.clip(img, 0.0, 1.0)


def synth_sequence(cfg: SynthConfig) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Frames (num_frames, H, W) in [0, 1] and the exact person centres per frame."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = int(rng.integers(cfg.min_people, cfg.max_people + 1))
    h, w = cfg.height, cfg.width
    lo = np.array([0.5, 0.5])
    hi = np.array([w - 0.5, h - 0.5])
    pos = lo + rng.random((n, 2)) * (hi - lo)
    frames, points = [], []
    for _ in range(cfg.num_frames):
        frames.append(render_blobs(pos, h, w, cfg.blob_sigma, cfg.perspective, cfg.background))
        points.append(pos.copy())
        if cfg.max_displacement > 0:
            ang = rng.uniform(0, 2 * np.pi, n)
            rad = cfg.max_displacement * rng.random(n)
            step = np.stack([np.cos(ang), np.sin(ang)], axis=1) * rad[:, None]
            pos = np.stack([_reflect(pos[:, 0] + step[:, 0], lo[0], hi[0]),
                            _reflect(pos[:, 1] + step[:, 1], lo[1], hi[1])], axis=1)
    return np.stack(frames), points


def write_synth_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write frames as PGM plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, points = synth_sequence(cfg)
    names = []
    for i, fr in enumerate(frames):
        name = f"frame_{i:05d}.pgm"
        write_gray(out / name, fr)
        names.append(name)
    m = DatasetManifest(names, points, None, cfg.kernel, 1.0, cfg.fps, out)
    path = out / "manifest.json"
    save_manifest(m, path)
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return path


def synth_windows(cfg: SynthConfig, t: int, stride: Optional[int] = None, mode: str = "train") -> List[ClipSample]:
    """In-memory clips straight from the generator (no 8-bit quantisation)."""
    frames, points = synth_sequence(cfg)
    h, w = cfg.height, cfg.width
    targets = np.stack([downscale_gt(density_map(p, cfg.kernel, h, w)) for p in points])
    roi_small = np.ones((h // GT_FACTOR, w // GT_FACTOR), dtype=bool)
    out = []
    starts = window_starts(cfg.num_frames, t, stride, mode)
    for k, s in enumerate(starts):
        idx = tuple(range(s, s + t))
        prev_end = starts[k - 1] + t if (mode == "eval" and k > 0) else -1
        counted = tuple(i >= prev_end for i in idx)
        out.append(ClipSample(frames[s : s + t][None, None].astype(np.float32),
                              targets[s : s + t][None, None], roi_small, idx, counted))
    return out
