"""Optional numba acceleration.

Kernels are written once as plain Python loops and compiled with ``numba.njit``
when numba is importable and ``ZSEP_NUMBA`` is not set to ``0``. Every kernel
also has a vectorized numpy twin; :data:`USE_NUMBA` picks which one the public
functions dispatch to.
"""

from __future__ import annotations

import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("ZSEP_NUMBA", "1").strip().lower() not in {"0", "false", "no", "off"}


def njit(func):
    """Compile ``func`` with numba in nopython mode, or return it untouched."""
    if not HAVE_NUMBA:
        return func
    return _njit(cache=True, nogil=True)(func)
