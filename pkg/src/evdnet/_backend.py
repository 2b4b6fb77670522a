"""Kernel backend selection.

The hot convolution loops exist twice: numba-compiled direct loops and a
pure-numpy shift-and-accumulate path. ``EVDNET_BACKEND=numpy`` forces the
numpy path; otherwise numba is used when importable.
"""

import os

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

BACKEND = os.environ.get("EVDNET_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise RuntimeError(f"EVDNET_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")
if BACKEND == "numba" and not HAVE_NUMBA:  # pragma: no cover
    BACKEND = "numpy"

USE_NUMBA = BACKEND == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return nb.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda func: func
