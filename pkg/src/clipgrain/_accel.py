"""Numba switch shared by every kernel module.

Set ``CLIPGRAIN_DISABLE_NUMBA=1`` to force the pure-numpy kernels, which is
handy for debugging and for checking that both paths agree.
"""

import os

_DISABLED = os.environ.get("CLIPGRAIN_DISABLE_NUMBA", "").strip().lower() in {
    "1",
    "true",
    "yes",
    "on",
}

try:
    from numba import njit as _numba_njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False
    _numba_njit = None

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when numba is present, otherwise a no-op decorator.

    Compiled functions are always built when numba is installed (the
    benchmark calls them directly); ``USE_NUMBA`` only controls which
    implementation the public dispatchers pick.
    """
    if NUMBA_AVAILABLE:
        return _numba_njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def decorator(func):
        return func

    return decorator


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
