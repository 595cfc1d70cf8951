"""Fine-structure refinement for a promptable mask decoder."""

from .base_model import PromptSet
from .config import ModelConfig, TrainConfig
from .model import RefinerModel

__version__ = "0.1.0"

__all__ = ["ModelConfig", "PromptSet", "RefinerModel", "TrainConfig", "__version__"]
