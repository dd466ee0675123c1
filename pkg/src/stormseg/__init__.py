"""Trainable storm-region segmentation on geo-referenced rasters.

Importing this package stays free of numpy so the command line can pin BLAS
thread environment variables before any numeric code loads; the tensor names
below resolve lazily on first access.
"""

from importlib import import_module

from .errors import (
    ContractError,
    DomainError,
    FormatError,
    ParameterError,
    ShapeError,
    StormsegError,
    TrainingDiverged,
)

_LAZY = {"Rng": "tensor", "Tensor": "tensor", "tensor": "tensor"}

__all__ = [
    "ContractError",
    "DomainError",
    "FormatError",
    "ParameterError",
    "Rng",
    "ShapeError",
    "StormsegError",
    "Tensor",
    "TrainingDiverged",
    "tensor",
]

__version__ = "0.1.0"


def __getattr__(name):
    if name in _LAZY:
        return getattr(import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
