"""Backend switch for the hot kernels.

Every kernel in :mod:`pointcal.kernels` exists twice: an explicit-loop body
compiled with ``numba.njit`` and a vectorized pure-numpy twin. The loop
bodies are chosen when numba imports cleanly and ``POINTCAL_DISABLE_NUMBA``
is unset (or ``0``); otherwise the numpy twins are used. Both paths return
identical results, which the test-suite checks kernel by kernel.
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("POINTCAL_DISABLE_NUMBA", "0").lower() in (
    "",
    "0",
    "false",
    "no",
)


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is present, else return it untouched."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
