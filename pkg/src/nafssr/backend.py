"""Kernel backend selection.

The stencil kernels (3x3 convolutions, box pooling) exist twice: a numba
@njit implementation and a pure-numpy one.  The active backend is chosen by
the NAFSSR_BACKEND environment variable ("numba", "numpy", or "auto") and
can be overridden at runtime with set_backend(), which the benchmark and the
backend-equivalence tests use.
"""

import os

from . import _kernels_numpy
from .errors import ConfigError

_ENV_VAR = "NAFSSR_BACKEND"
_active = None
_active_name = None


def _load_numba_kernels():
    from . import _kernels_numba  # deferred: importing numba is slow

    return _kernels_numba


def available_backends():
    names = ["numpy"]
    try:
        import numba  # noqa: F401

        names.insert(0, "numba")
    except ImportError:
        pass
    return names


def set_backend(name):
    """Force a backend by name; returns the kernel module now in use."""
    global _active, _active_name
    if name in (None, "auto"):
        try:
            _active = _load_numba_kernels()
            _active_name = "numba"
        except ImportError:
            _active = _kernels_numpy
            _active_name = "numpy"
    elif name == "numba":
        _active = _load_numba_kernels()
        _active_name = "numba"
    elif name == "numpy":
        _active = _kernels_numpy
        _active_name = "numpy"
    else:
        raise ConfigError(f"unknown backend {name!r}; expected numba, numpy, or auto")
    return _active


def kernels():
    """Kernel module currently selected (resolves the env flag on first use)."""
    if _active is None:
        set_backend(os.environ.get(_ENV_VAR, "auto"))
    return _active


def backend_name():
    kernels()
    return _active_name
