"""Optional numba acceleration.

Hot loops in this package are written once as plain Python over numpy arrays
and decorated with :func:`maybe_njit`.  When numba is importable and the
``SVEAVATAR_DISABLE_NUMBA`` environment variable is unset (or ``0``), they are
compiled in nopython mode; otherwise the undecorated Python function is used
and callers switch to their vectorised numpy path.
"""
import os

_DISABLE = os.environ.get("SVEAVATAR_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def maybe_njit(*args, **kwargs):
    """``numba.njit`` when acceleration is enabled, identity otherwise."""
    if HAS_NUMBA:
        return numba.njit(*args, cache=True, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend():
    return "numba" if HAS_NUMBA else "numpy"
