"""Kernel backend selection.

Hot elementwise kernels (layer norm, softmax, Adam) run as numba @njit
loops by default, with a pure-numpy fallback. The env var DELIBMT_BACKEND
selects the path:

    DELIBMT_BACKEND=numba   require numba (ImportError if missing)
    DELIBMT_BACKEND=numpy   force the numpy fallback
    DELIBMT_BACKEND=auto    numba when importable (default)

The choice is fixed at import time; `benchmarks/bench_kernels.py` compares
both paths.
"""

import os

_CHOICE = os.environ.get("DELIBMT_BACKEND", "auto").lower()
if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"DELIBMT_BACKEND must be one of auto|numba|numpy, got {_CHOICE!r}"
    )

_HAVE_NUMBA = False
if _CHOICE in ("auto", "numba"):
    try:
        import numba  # noqa: F401

        _HAVE_NUMBA = True
    except ImportError:
        if _CHOICE == "numba":
            raise


def use_numba() -> bool:
    return _HAVE_NUMBA


def active_backend() -> str:
    return "numba" if _HAVE_NUMBA else "numpy"
