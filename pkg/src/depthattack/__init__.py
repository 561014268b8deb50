"""Targeted adversarial perturbations for toy monocular depth networks."""
from .errors import ConfigError, DataError, DepthAttackError, NumericsError, ShapeError

__all__ = ["ConfigError", "DataError", "DepthAttackError", "NumericsError", "ShapeError"]
__version__ = "0.1.0"
