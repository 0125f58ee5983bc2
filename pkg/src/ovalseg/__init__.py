"""Weakly-supervised lesion segmentation with per-pixel label confidence."""

from .errors import (
    ConfigError,
    FormatError,
    InvalidInputError,
    InvalidStateError,
    NumericError,
    OvalsegError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "InvalidInputError",
    "InvalidStateError",
    "NumericError",
    "OvalsegError",
    "ShapeError",
    "__version__",
]
