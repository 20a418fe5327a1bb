"""Numba switch.

Hot kernels are written once as plain Python loops and compiled with
``numba.njit`` unless ``HUBVSE_DISABLE_NUMBA`` is set to a truthy value, in
which case callers dispatch to the vectorised numpy implementations instead.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled() -> bool:
    return os.environ.get("HUBVSE_DISABLE_NUMBA", "").strip().lower() not in _FALSY


try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise.

    The decorated function is always compiled lazily on first call, so merely
    importing the package never pays the JIT cost.
    """
    kwargs.setdefault("cache", True)
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda f: f


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
