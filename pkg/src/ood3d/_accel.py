"""Selects between numba-compiled kernels and their pure-numpy twins.

Set ``OOD3D_DISABLE_NUMBA=1`` to force the numpy path (useful for debugging and
for platforms without an LLVM toolchain).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAS_NUMBA = numba is not None
USE_NUMBA = HAS_NUMBA and os.environ.get("OOD3D_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def njit(fn=None, **kwargs):
    """``numba.njit(cache=True)`` when numba is present, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(f):
        if not HAS_NUMBA:
            return f
        return numba.njit(**kwargs)(f)

    if fn is None:
        return wrap
    return wrap(fn)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
