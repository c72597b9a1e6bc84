"""Numba switch shared by all hot kernels.

Set ``SEMFLOW_DISABLE_JIT=1`` to run every kernel through its pure-numpy path.
"""

import os

_flag = os.environ.get("SEMFLOW_DISABLE_JIT", "0").strip().lower()
DISABLE_JIT = _flag in ("1", "true", "yes", "on")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLE_JIT

numba_default = {
    "nopython": True,
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
}


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if HAVE_NUMBA:
        return numba.jit(**numba_default)(fn)
    return fn
