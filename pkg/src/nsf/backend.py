"""Backend selection for hot numeric kernels.

Every performance-critical elementwise kernel in this package exists twice:
once in njit-compatible loop style and once as a vectorized numpy twin.
The numba path is active when numba imports successfully and the
environment variable ``NSF_NO_NUMBA`` is unset (or ``"0"``); setting
``NSF_NO_NUMBA=1`` before import forces the numpy path everywhere.

``NSF_THREADS`` caps the numba threading layer. The kernels here are all
sequential (reproducibility beats parallel reductions for this package),
so the cap only matters for interplay with other numba users in the same
process.

Modules obtain the active implementation through :func:`dispatch`; both
variants stay importable for parity tests and benchmarks.
"""

import os

_flag = os.environ.get("NSF_NO_NUMBA", "").strip()
_numba_disabled = _flag not in ("", "0")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    HAVE_NUMBA = False

NUMBA_ACTIVE = HAVE_NUMBA and not _numba_disabled

if NUMBA_ACTIVE:
    _threads = os.environ.get("NSF_THREADS", "").strip()
    if _threads:
        _n = max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(_n)


def compile_kernel(py_func):
    """Compile a loop-style kernel with numba (lazy, disk-cached)."""
    if not HAVE_NUMBA:
        raise RuntimeError("numba is not available")
    return numba.njit(cache=True)(py_func)


def dispatch(loops_func, numpy_func):
    """Pick the active implementation of a kernel pair at import time."""
    if NUMBA_ACTIVE:
        return compile_kernel(loops_func)
    return numpy_func
