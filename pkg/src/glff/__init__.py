"""GLFF: global and local feature fusion for AI-synthesized image detection."""
from .backbone import BackboneConfig
from .errors import ConfigError, EncoderNotFoundError, NumericError, PreprocessError
from .model import GLFF, GLFFConfig, apply_variant, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ConfigError",
    "EncoderNotFoundError",
    "GLFF",
    "GLFFConfig",
    "NumericError",
    "PreprocessError",
    "apply_variant",
    "load_checkpoint",
    "save_checkpoint",
]
