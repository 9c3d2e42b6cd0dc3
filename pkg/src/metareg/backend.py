"""Selects the kernel backend at import time.

The compiled Cython core (`metareg._ckernels`) is preferred; the numpy
implementation (`metareg._kernels_np`) is the fallback. Override with the
environment variable METAREG_BACKEND=numpy|cython, or at runtime with
`set_backend` (used by tests and the benchmark).
"""
import os

from . import _kernels_np
from .errors import ConfigError

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_BACKENDS = {"numpy": _kernels_np}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def _initial():
    name = os.environ.get("METAREG_BACKEND", "auto")
    if name == "auto":
        return _ckernels if _ckernels is not None else _kernels_np
    if name not in _BACKENDS:
        raise ConfigError(
            f"METAREG_BACKEND={name!r} not available (choices: {sorted(_BACKENDS)})"
        )
    return _BACKENDS[name]


_active = _initial()


def active():
    """The module providing the hot kernels."""
    return _active


def active_name():
    return _active.NAME


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Switch backends; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ConfigError(f"backend {name!r} not available (choices: {sorted(_BACKENDS)})")
    prev = _active.NAME
    _active = _BACKENDS[name]
    return prev
