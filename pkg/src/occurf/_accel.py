"""Numba switch.

Hot kernels are written twice: an ``@njit`` version and a plain numpy version
with identical results. Setting ``OCCURF_DISABLE_NUMBA=1`` (or running without
numba installed) selects the numpy path for every dispatcher.
"""

import os

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def _env_disabled():
    return os.environ.get("OCCURF_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def set_use_numba(flag):
    """Force the kernel backend at runtime (used by tests and the benchmark)."""
    global USE_NUMBA
    USE_NUMBA = bool(flag) and HAVE_NUMBA


def use_numba():
    return USE_NUMBA


def set_threads(n):
    """Cap BLAS worker threads; ``n=1`` is the bit-exact mode.

    The compiled kernels are serial, so numba's own thread pool is left alone
    (starting it only to resize it costs time and can warn about TBB).
    """
    n = max(1, int(n))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass
