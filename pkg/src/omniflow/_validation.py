"""Small input-validation helpers used by the public API and the estimators."""
import numbers

import numpy as np

from .exceptions import RejectedInputError


def check_tensor(x, ndim=None, name="input", allow_empty=True):
    """Return ``x`` as a float64 array, rejecting wrong rank or non-finite data."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise RejectedInputError(f"{name} must have {ndim} dims, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise RejectedInputError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise RejectedInputError(f"{name} contains non-finite entries")
    return arr


def check_probability(p, name="p"):
    if not isinstance(p, numbers.Real) or not 0.0 <= float(p) <= 1.0:
        raise RejectedInputError(f"{name} must be a probability in [0, 1], got {p!r}")
    return float(p)


def check_unit_interval(u, name="u"):
    u = float(u)
    if not 0.0 <= u <= 1.0:
        raise RejectedInputError(f"{name} must lie in [0, 1], got {u}")
    return u


def check_positive_int(n, name="n", allow_zero=False):
    if isinstance(n, bool) or not isinstance(n, numbers.Integral):
        raise RejectedInputError(f"{name} must be an integer, got {n!r}")
    if n < 0 or (n == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise RejectedInputError(f"{name} must be {bound}, got {n}")
    return int(n)


def check_same_width(arrays, name="segments"):
    widths = {a.shape[-1] for a in arrays}
    if len(widths) > 1:
        raise RejectedInputError(f"{name} disagree on feature width: {sorted(widths)}")
