"""Numba dispatch.

Set ``MVALIGN_NUMBA=0`` before import to force the pure-numpy kernels.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("MVALIGN_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(func):
    if numba is None:  # pragma: no cover
        return func
    return numba.njit(cache=True, nogil=True)(func)


def pick(numba_impl, numpy_impl):
    """Return the numba kernel when acceleration is on, else the numpy one."""
    return numba_impl if USE_NUMBA else numpy_impl
