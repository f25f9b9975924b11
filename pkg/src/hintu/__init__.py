"""Local-contrast hint prior for small-target segmentation on a numpy engine."""

from hintu.hint import HintConfig, HintModule, hint_prior
from hintu.model import HintUNet, ModelConfig, build_model
from hintu.unet import PRESETS, UNet, UNetConfig, build_unet

__all__ = [
    "HintConfig",
    "HintModule",
    "HintUNet",
    "ModelConfig",
    "PRESETS",
    "UNet",
    "UNetConfig",
    "build_model",
    "build_unet",
    "hint_prior",
]

__version__ = "0.1.0"
