"""Shared test utilities: finite differences and error norms."""

import numpy as np


def central_diff(f, x, step=1e-5):
    """Central finite differences of a scalar function at flat vector x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy(); xp[i] += step
        xm = x.copy(); xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def directional_diff(f, x, d, step=1e-5):
    """Central difference of f along direction d at x (both flat arrays)."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return (f(x + step * d) - f(x - step * d)) / (2 * step)


def rel_err(a, b):
    """Max relative error with an absolute floor, suitable for gradient checks."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))
