"""Backend selection for the hot integer kernels.

Kernels come in pairs: a loop implementation compiled with numba ``@njit``
and a vectorised pure-numpy implementation. Set ``FQSR_NUMBA=0`` in the
environment to force the numpy path (it is also used when numba is not
importable). ``set_backend`` switches at runtime, which the benchmark uses.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the bundled TBB is too old; skip it instead of warning on first launch
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False

_DISABLED = os.environ.get("FQSR_NUMBA", "1").strip().lower() in ("0", "false", "no", "off")
_backend = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is present, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def use_numba():
    return _backend == "numba"
