"""Central finite-difference helpers for checking hand-written backward passes."""

import numpy as np


def numerical_grad(f, arr, step=1e-4, indices=None):
    """Central differences of scalar ``f()`` with respect to ``arr`` (modified in place).

    ``indices`` restricts the check to a subset of entries; the remaining
    entries of the returned array are NaN.
    """
    out = np.full(arr.shape, np.nan)
    it = np.ndindex(arr.shape) if indices is None else indices
    for idx in it:
        old = arr[idx]
        arr[idx] = old + step
        fp = f()
        arr[idx] = old - step
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * step)
    return out


def relative_error(analytic, numeric):
    """Max abs difference over checked entries, relative to the largest numeric magnitude."""
    mask = ~np.isnan(numeric)
    a = np.asarray(analytic)[mask]
    n = numeric[mask]
    scale = max(np.abs(n).max(), np.abs(a).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


def sample_indices(shape, count, rng):
    """Up to ``count`` distinct random multi-indices into an array of ``shape``."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]
