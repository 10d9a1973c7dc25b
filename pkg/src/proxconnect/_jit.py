"""Optional numba acceleration.

Set ``PROXCONNECT_NO_JIT=1`` to force the pure-numpy kernels, e.g. when
numba is unavailable or when comparing both paths.
"""
import os

_disabled = os.environ.get("PROXCONNECT_NO_JIT", "").strip().lower() not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None

HAVE_NUMBA = numba is not None
JIT_ENABLED = HAVE_NUMBA and not _disabled


def njit(fn=None, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    The compiled dispatcher is built even if the env flag disables JIT;
    the flag only changes which implementation :mod:`proxconnect.kernels`
    exports by default, so the benchmark can still compare both.
    """
    kwargs.setdefault("cache", True)
    if numba is None:
        return fn if fn is not None else (lambda f: f)
    if fn is None:
        return numba.njit(**kwargs)
    return numba.njit(**kwargs)(fn)
