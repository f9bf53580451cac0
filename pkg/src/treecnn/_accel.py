"""Numba switch.

Set ``TREECNN_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. when
debugging or on platforms without a working LLVM.
"""
import os

_disabled = os.environ.get("TREECNN_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


BACKEND = "numba" if HAVE_NUMBA else "numpy"
