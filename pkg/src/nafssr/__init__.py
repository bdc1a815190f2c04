"""Stereo image super-resolution toolkit.

A self-contained CPU implementation of a stereo SR network built from
intra-view feature blocks and bidirectional cross-view attention along
epipolar rows, with its own reverse-mode autodiff engine, trainer,
synthetic data generator, and evaluation harness.
"""

from .backend import available_backends, backend_name, set_backend
from .errors import (
    ConfigError,
    DataError,
    GraphError,
    NumericsError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "available_backends",
    "backend_name",
    "set_backend",
    "ConfigError",
    "DataError",
    "GraphError",
    "NumericsError",
    "ShapeError",
    "__version__",
]
