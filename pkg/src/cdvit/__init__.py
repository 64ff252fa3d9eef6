"""Multi-resolution context/detail vision transformer toolkit."""

from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .config import ModelConfig, PRESETS, get_config

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_check",
    "no_grad",
    "ModelConfig",
    "PRESETS",
    "get_config",
    "__version__",
]
