"""Iterative deep unsupervised (IDUS) and semi-supervised (IDSS) texture segmentation."""

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    IdusError,
    NonFiniteLossError,
    UndefinedClassError,
)
from .preprocess import UNLABELED, ImageRecord, preprocess

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DegenerateInputError",
    "IdusError",
    "ImageRecord",
    "NonFiniteLossError",
    "UNLABELED",
    "UndefinedClassError",
    "preprocess",
]
