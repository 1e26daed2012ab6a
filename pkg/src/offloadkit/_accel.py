"""Numba switch for the hot kernels.

Set ``OFFLOADKIT_DISABLE_NUMBA=1`` to run every kernel through its pure
numpy / Python path. When numba is missing the fallback is used silently.
"""
import os

_DISABLED = os.environ.get("OFFLOADKIT_DISABLE_NUMBA", "").lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED


def jit(fn=None, **options):
    """``numba.njit`` when enabled, identity otherwise."""
    options.setdefault("cache", True)

    def wrap(f):
        if USE_NUMBA:
            return numba.njit(**options)(f)
        return f

    if fn is None:
        return wrap
    return wrap(fn)


def python_impl(fn):
    """Return the uncompiled Python function behind a jitted kernel."""
    return getattr(fn, "py_func", fn)
