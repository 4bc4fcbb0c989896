"""Backend switch for the hot kernels.

Numba-compiled kernels are used when numba imports cleanly and the
``POPCORN_DISABLE_NUMBA`` environment variable is unset or ``0``.  Setting
it to ``1`` forces the pure-numpy path everywhere.  The flag is read once at
import time; use :func:`use_numba` to flip it inside a process (tests and the
benchmark do this).
"""
import os

_FLAG = "POPCORN_DISABLE_NUMBA"

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_enabled = HAS_NUMBA and os.environ.get(_FLAG, "0").strip().lower() not in ("1", "true", "yes")


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a no-op without numba."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)

    def wrap(func):
        if not HAS_NUMBA:
            return func
        return numba.njit(**kwargs)(func)

    if len(args) == 1 and callable(args[0]):
        return wrap(args[0])
    return wrap


def numba_enabled():
    return _enabled


def use_numba(flag):
    """Select the backend for subsequent kernel calls; returns the previous setting."""
    global _enabled
    prev = _enabled
    if flag and not HAS_NUMBA:
        raise RuntimeError("numba is not importable")
    _enabled = bool(flag)
    return prev


def backend_name():
    return "numba" if _enabled else "numpy"
