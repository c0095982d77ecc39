"""Skeleton-to-grid representation learning for action recognition."""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
    GradCheckError,
    LoadError,
    NonFiniteError,
    Ske2GridError,
)
from .network import Recognizer, build_model
from .skeleton import SkeletonGraph, SkeletonSequence, builtin_skeleton, generate_synthetic
from .tensor import Tensor, no_grad, tensor
from .transform import GridSize, PlsCascade, build_cascade, cascade_forward

__version__ = "1.0.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "GradCheckError",
    "GridSize",
    "LoadError",
    "NonFiniteError",
    "PlsCascade",
    "Recognizer",
    "Ske2GridError",
    "SkeletonGraph",
    "SkeletonSequence",
    "Tensor",
    "build_cascade",
    "build_model",
    "builtin_skeleton",
    "cascade_forward",
    "generate_synthetic",
    "no_grad",
    "tensor",
]
