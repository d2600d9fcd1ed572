# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, pow, sqrt

cnp.import_array()


def holder_window_max(values, double spacing, double alpha, Py_ssize_t window):
    cdef double[::1] f = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0]
    cdef Py_ssize_t i, off, wmax = min(window, n - 1)
    cdef double best = 0.0, d, scale
    for off in range(1, wmax + 1):
        scale = pow(spacing * off, alpha)
        for i in range(n - off):
            d = fabs(f[i + off] - f[i]) / scale
            if d > best:
                best = d
    return best


def triangle_areas(vertices, faces):
    cdef double[:, ::1] v = np.ascontiguousarray(vertices, dtype=np.float64)
    cdef long long[:, ::1] f = np.ascontiguousarray(faces, dtype=np.int64)
    cdef Py_ssize_t nf = f.shape[0], k
    out = np.empty(nf, dtype=np.float64)
    cdef double[::1] a = out
    cdef double ax, ay, az, bx, by, bz, cx, cy, cz
    for k in range(nf):
        ax = v[f[k, 1], 0] - v[f[k, 0], 0]
        ay = v[f[k, 1], 1] - v[f[k, 0], 1]
        az = v[f[k, 1], 2] - v[f[k, 0], 2]
        bx = v[f[k, 2], 0] - v[f[k, 0], 0]
        by = v[f[k, 2], 1] - v[f[k, 0], 1]
        bz = v[f[k, 2], 2] - v[f[k, 0], 2]
        cx = ay * bz - az * by
        cy = az * bx - ax * bz
        cz = ax * by - ay * bx
        a[k] = 0.5 * sqrt(cx * cx + cy * cy + cz * cz)
    return out


def weighted_area(vertices, faces, weights):
    cdef double[::1] a = triangle_areas(vertices, faces)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t k
    cdef double total = 0.0
    for k in range(a.shape[0]):
        total += a[k] * w[k]
    return total
