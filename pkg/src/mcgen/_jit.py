"""Optional numba acceleration.

Set ``MCGEN_KERNELS=numpy`` to force the pure-numpy kernels even when numba
is importable. ``MCGEN_THREADS`` bounds BLAS and numba thread pools.
"""
import os

try:
    from numba import njit as _njit
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def backend_from_env():
    name = os.environ.get("MCGEN_KERNELS", "numba" if HAVE_NUMBA else "numpy").lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"MCGEN_KERNELS must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


def optional_njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise; usable bare or called."""
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return optional_njit()(args[0])
    kwargs.setdefault("cache", True)

    def decorator(func):
        if HAVE_NUMBA:
            return _njit(*args, **kwargs)(func)
        return func

    return decorator


_thread_limiter = None


def limit_threads(n=None):
    """Bound kernel parallelism; reads MCGEN_THREADS when ``n`` is None."""
    global _thread_limiter
    if n is None:
        raw = os.environ.get("MCGEN_THREADS")
        if not raw:
            return None
        n = int(raw)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    from threadpoolctl import threadpool_limits

    _thread_limiter = threadpool_limits(limits=n)
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n
