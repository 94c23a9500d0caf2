"""Two-branch silhouette and depth gait recognition with multi-scale cross-level fusion."""
from .errors import ConfigError, EmptyForeground, EmptySequence, TrainingDiverged
from .fusion import FusionVariant
from .model import GaitModel, ModelSpec, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
__all__ = ["ConfigError", "EmptyForeground", "EmptySequence", "TrainingDiverged",
           "FusionVariant", "GaitModel", "ModelSpec", "load_checkpoint", "save_checkpoint"]
