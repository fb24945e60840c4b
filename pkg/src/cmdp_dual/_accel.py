"""Numba switch.

Hot kernels are written once as plain Python loops and compiled with numba
when it is importable and ``CMDP_DUAL_DISABLE_NUMBA`` is unset.  Otherwise
every kernel resolves to its vectorized numpy twin in :mod:`cmdp_dual.kernels`.
"""
from __future__ import annotations

import os

_FLAG = "CMDP_DUAL_DISABLE_NUMBA"


def _env_disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in ("", "0", "false", "no")


try:
    if _env_disabled():
        raise ImportError
    import numba as _numba

    NUMBA_AVAILABLE = True
except ImportError:
    _numba = None
    NUMBA_AVAILABLE = False


def njit(fn):
    """``numba.njit(cache=True)`` when available, identity otherwise."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def use_numba() -> bool:
    return NUMBA_AVAILABLE
