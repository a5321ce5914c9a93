"""Optional numba acceleration; kernels run as plain Python without it."""

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    _njit = None


def njit(fn):
    if _njit is None:
        return fn
    return _njit(cache=True, nogil=True)(fn)
