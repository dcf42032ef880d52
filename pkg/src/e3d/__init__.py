"""Temporal channel-aware (TCA) networks for video crowd counting, in numpy."""
from .density import KernelPolicy, adaptive_sigmas, apply_roi, downscale_gt, render_density
from .model import NetConfig, Network, build_network, network_forward, tca_forward
from .train import TrainConfig, evaluate, masked_mse_loss, train

__all__ = [
    "KernelPolicy",
    "NetConfig",
    "Network",
    "TrainConfig",
    "adaptive_sigmas",
    "apply_roi",
    "build_network",
    "downscale_gt",
    "evaluate",
    "masked_mse_loss",
    "network_forward",
    "render_density",
    "tca_forward",
    "train",
]

__version__ = "0.1.0"
