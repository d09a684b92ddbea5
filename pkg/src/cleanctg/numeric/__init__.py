from .ops import ConfigError, ShapeError
from .state import AdamMoments, ModelState, adam_step, load_checkpoint, save_checkpoint

__all__ = ["AdamMoments", "ConfigError", "ModelState", "ShapeError", "adam_step",
           "load_checkpoint", "save_checkpoint"]
