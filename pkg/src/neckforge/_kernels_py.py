"""Pure-numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them loop-for-loop.
"""
import numpy as np


def holder_window_max(values, spacing, alpha, window):
    """Max of |f_i - f_j| / (spacing*|i-j|)**alpha over 0 < |i-j| <= window (1D)."""
    values = np.ascontiguousarray(values, dtype=float)
    n = values.shape[0]
    best = 0.0
    for off in range(1, min(window, n - 1) + 1):
        diff = np.abs(values[off:] - values[:-off])
        q = diff.max() / (spacing * off) ** alpha
        if q > best:
            best = q
    return float(best)


def triangle_areas(vertices, faces):
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=np.int64)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def weighted_area(vertices, faces, weights):
    """Sum of triangle areas times per-face weights."""
    return float(np.dot(triangle_areas(vertices, faces), np.asarray(weights, dtype=float)))
