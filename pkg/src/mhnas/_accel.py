"""Numba switch.

Set ``MHNAS_DISABLE_NUMBA=1`` to force the pure-numpy kernels. Numba is also
skipped silently when it is not importable.
"""

import os

_FALSE = {"", "0", "false", "no", "off"}

USE_NUMBA = os.environ.get("MHNAS_DISABLE_NUMBA", "").strip().lower() in _FALSE

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def njit(fn):
    """``numba.njit(cache=True)`` when numba is on, otherwise ``fn`` untouched."""
    if not USE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
