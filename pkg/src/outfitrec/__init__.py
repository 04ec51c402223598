"""Personalized outfit recommendation with teacher-guided false-negative
distillation, contrastive augmentation and cold-start aggregation."""
from .errors import (ConfigError, DataError, NumericError, OutfitRecError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "OutfitRecError", "__version__"]
