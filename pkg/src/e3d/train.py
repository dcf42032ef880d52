"""Loss, optimisers, checkpoints, the training loop and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import ClipSample
from .density import apply_roi
from .metrics import summarize
from .model import NetConfig, Network, build_network, network_forward, predict
from .tensor import ShapeError, read_dmap, write_dmap

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "e3d-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    steps: int = 100
    batch_size: int = 1
    seed: int = 0
    window_stride: Optional[int] = None
    checkpoint_every: int = 0
    precision: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        # lr == 0 is allowed: it is the frozen-parameter control run
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def masked_mse_loss(pred: np.ndarray, target: np.ndarray, roi_small: Optional[np.ndarray] = None
                    ) -> Tuple[float, np.ndarray]:
    """Mean squared error over in-ROI cells of every frame, and its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if roi_small is None:
        mask = np.ones(pred.shape[-2:], dtype=bool)
    else:
        mask = np.asarray(roi_small, dtype=bool)
        if mask.shape != pred.shape[-2:]:
            raise ShapeError(f"ROI {mask.shape} does not match output {pred.shape[-2:]}")
    denom = int(np.prod(pred.shape[:-2])) * int(mask.sum())
    if denom == 0:
        raise ValueError("ROI selects no cells")
    diff = np.where(mask, pred - target, 0).astype(pred.dtype, copy=False)
    loss = float(np.sum(diff.astype(np.float64) ** 2) / denom)
    grad = (2.0 / denom) * diff
    return loss, grad.astype(pred.dtype, copy=False)


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, lr=1e-3, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.buf: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            b = self.buf.setdefault(k, np.zeros_like(p))
            b *= self.momentum
            b += grads[k]
            p -= (self.lr * b).astype(p.dtype)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(cfg.lr, cfg.momentum)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, net: Network, seed: int, step: int, extra: Optional[dict] = None) -> None:
    params = net.parameters()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "seed": seed,
        "step": step,
        "dtype": str(net.dtype),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in params.values():
            write_dmap(f, v.reshape((1,) * (5 - v.ndim) + v.shape))


def load_checkpoint(path) -> Tuple[Network, dict]:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: unreadable checkpoint header") from e
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not an e3d checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
        cfg = NetConfig.from_dict(header["config"])
        net = build_network(cfg, seed=header.get("seed", 0), dtype=np.dtype(header["dtype"]))
        params = net.parameters()
        names = [p["name"] for p in header["params"]]
        if names != list(params):
            raise CheckpointError(f"{path}: parameter list does not match its config")
        for name, arr in params.items():
            data = read_dmap(f)
            if data.size != arr.size:
                raise CheckpointError(f"{path}: parameter {name} has {data.size} values, expected {arr.size}")
            arr[...] = data.reshape(arr.shape)
    return net, header


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    net: Network
    losses: List[float]
    checkpoints: List[Path] = field(default_factory=list)


def _check_clip(clip: ClipSample, cfg: NetConfig) -> None:
    if clip.input.shape[1] != cfg.in_channels:
        raise ShapeError(f"clip has {clip.input.shape[1]} channels, network expects {cfg.in_channels}")
    if clip.input.shape[2] != cfg.clip_length:
        raise ShapeError(f"clip has {clip.input.shape[2]} frames, config clip_length is {cfg.clip_length}")


def train_step(net: Network, clips: Sequence[ClipSample]) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean loss and mean parameter gradients over ``clips``, summed in order."""
    total = 0.0
    acc: Dict[str, np.ndarray] = {}
    for clip in clips:
        fwd = network_forward(clip.input, net)
        target = clip.targets.astype(net.dtype, copy=False)
        loss, g = masked_mse_loss(fwd.value, target, clip.roi_small)
        if not np.isfinite(loss):
            return loss, {}  # caller aborts; no point back-propagating NaNs
        grads = fwd.pullback(g)
        total += loss
        for k, v in grads.items():
            if k in acc:
                acc[k] += v
            else:
                acc[k] = v.copy()
    n = len(clips)
    if n > 1:
        for v in acc.values():
            v /= n
    return total / n, acc


def train(windows: Sequence[ClipSample], net_cfg: NetConfig, train_cfg: TrainConfig,
          out_dir: Optional[Union[str, Path]] = None, net: Optional[Network] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train on ``windows``; deterministic for fixed seeds.

    Windows are visited in a seeded random order, reshuffled every pass.
    Checkpoints go to ``out_dir`` every ``checkpoint_every`` steps and at
    the end, alongside ``losses.json``.
    """
    if len(windows) == 0:
        raise ValueError("no training windows")
    net = net or build_network(net_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    _check_clip(windows[0], net.config)
    params = net.parameters()
    opt = make_optimizer(train_cfg)
    rng = np.random.default_rng(train_cfg.seed + 1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    order: List[int] = []
    losses: List[float] = []
    ckpts: List[Path] = []
    for step in range(1, train_cfg.steps + 1):
        batch = []
        for _ in range(train_cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(windows)))
            batch.append(windows[int(order.pop(0))])
        loss, grads = train_step(net, batch)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        opt.step(params, grads)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
        if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            p = out / f"step_{step:06d}.ckpt"
            save_checkpoint(p, net, train_cfg.seed, step)
            ckpts.append(p)
    if out is not None:
        p = out / "final.ckpt"
        save_checkpoint(p, net, train_cfg.seed, train_cfg.steps, {"train": train_cfg.to_dict()})
        ckpts.append(p)
        (out / "losses.json").write_text(json.dumps({"loss": losses}) + "\n")
    return TrainResult(net, losses, ckpts)


# -- evaluation --------------------------------------------------------------

Predictor = Callable[[ClipSample], np.ndarray]


def evaluate(model: Union[Network, Predictor], windows: Sequence[ClipSample],
             levels: Tuple[int, ...] = (0, 1, 2, 3)) -> Tuple[dict, np.ndarray]:
    """Metrics report over evaluation windows and the ROI-masked predicted maps.

    Only frames a window is credited with (``counted``) enter the metrics,
    so overlapping tail windows do not double count.
    """
    run = (lambda clip: predict(clip.input, model)) if isinstance(model, Network) else model
    preds, gts, frames = [], [], []
    for clip in windows:
        out = np.asarray(run(clip))
        if out.shape != clip.targets.shape:
            raise ShapeError(f"prediction {out.shape} does not match targets {clip.targets.shape}")
        out = apply_roi(out.astype(np.float64), clip.roi_small)
        tgt = apply_roi(clip.targets.astype(np.float64), clip.roi_small)
        for t, (idx, use) in enumerate(zip(clip.frame_indices, clip.counted)):
            if use:
                preds.append(out[0, 0, t])
                gts.append(tgt[0, 0, t])
                frames.append(idx)
    report = summarize(preds, gts, frames, levels)
    return report, np.stack(preds)
