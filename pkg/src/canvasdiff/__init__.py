"""canvasdiff: multi-turn instruction-driven image generation on a toy grid
world, built on conditional denoising diffusion with contrastive alignment."""

__version__ = "0.1.0"

from .diffusion import GuidanceConfig, build_schedule
from .model import CanvasModel, ModelConfig
from .world import WorldConfig

__all__ = [
    "CanvasModel",
    "ModelConfig",
    "WorldConfig",
    "GuidanceConfig",
    "build_schedule",
    "__version__",
]
