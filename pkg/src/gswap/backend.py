"""Compute-backend selection for the splatting kernels.

Two interchangeable kernel sets exist: a pure-numpy reference
(`kernels_numpy`) and numba-compiled per-pixel loops (`kernels_numba`).
Both run the same arithmetic in the same order; the numba path is simply
faster. The active backend is chosen, in order of precedence, by
`set_backend()`, the `GSWAP_BACKEND` environment variable, and finally
"numba" when importable, else "numpy".
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

from .errors import ConfigError

ENV_VAR = "GSWAP_BACKEND"
_CHOICES = ("numpy", "numba")

_backend: str | None = None


def numba_available() -> bool:
    try:
        importlib.import_module("numba")
    except Exception:
        return False
    return True


def _validate(name: str) -> str:
    if name not in _CHOICES:
        raise ConfigError(f"unknown backend {name!r}; choose one of {_CHOICES}")
    if name == "numba" and not numba_available():
        raise ConfigError("backend 'numba' requested but numba is not importable")
    return name


def get_backend() -> str:
    """The active backend name, resolving the default on first use."""
    global _backend
    if _backend is None:
        env = os.environ.get(ENV_VAR)
        if env:
            _backend = _validate(env.strip().lower())
        else:
            _backend = "numba" if numba_available() else "numpy"
    return _backend


def set_backend(name: str) -> None:
    """Select the kernel set for subsequent renders."""
    global _backend
    _backend = _validate(name)


def kernels() -> ModuleType:
    """The kernel module of the active backend."""
    if get_backend() == "numba":
        from . import kernels_numba

        return kernels_numba
    from . import kernels_numpy

    return kernels_numpy
