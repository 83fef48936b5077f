"""numba switch.

Set ``SCANET_DISABLE_JIT=1`` to run every kernel through its pure-numpy path.
The flag is read once at import time.
"""
import os

_FLAG = os.environ.get("SCANET_DISABLE_JIT", "").strip().lower()

try:
    import numba as nb
except ImportError:  # pragma: no cover
    nb = None

JIT_AVAILABLE = nb is not None
JIT_ENABLED = JIT_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise.

    Kernels are always compiled if numba exists so that both paths stay
    available to tests and the benchmark; ``JIT_ENABLED`` only controls which
    path the tensor ops dispatch to.
    """
    if nb is not None:
        kwargs.setdefault("cache", True)
        return nb.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda func: func
