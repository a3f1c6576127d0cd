"""Optional numba acceleration.

Kernels are compiled with ``numba.njit`` when numba is importable and the
environment variable ``SMOOTHSQP_DISABLE_NUMBA`` is unset (or falsy).
Otherwise the plain Python/numpy implementations are used unchanged.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    flag = os.environ.get("SMOOTHSQP_DISABLE_NUMBA", "").strip().lower()
    return HAVE_NUMBA and flag in _FALSY


USE_NUMBA = numba_enabled()


def maybe_njit(func):
    """Compile ``func`` with numba if enabled, else return it untouched."""
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
