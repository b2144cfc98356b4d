"""Prompt-conditioned CNN/Transformer restoration network on a small numpy autodiff engine."""
from .model import CaptNet, CaptNetConfig, build, forward, psnr_loss
from .train import TrainConfig, train

__all__ = ["CaptNet", "CaptNetConfig", "build", "forward", "psnr_loss", "TrainConfig", "train"]
__version__ = "0.1.0"
