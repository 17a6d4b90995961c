# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback.py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def nearest_entries(const real[:, ::1] x, const real[:, ::1] entries):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], k = entries.shape[0]
    cdef Py_ssize_t i, j, c, best
    cdef double dist, diff, best_dist
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = out
    with nogil:
        for i in range(n):
            best = 0
            best_dist = INFINITY
            for c in range(k):
                dist = 0
                for j in range(d):
                    diff = <double>x[i, j] - <double>entries[c, j]
                    dist = dist + diff * diff
                if dist < best_dist:
                    best_dist = dist
                    best = c
            idx[i] = best
    return out


def masked_softmax_rows(const real[:, ::1] x, const cnp.uint8_t[:, ::1] allowed):
    cdef Py_ssize_t n = x.shape[0], t = x.shape[1]
    cdef Py_ssize_t r, j, row
    cdef double m, s
    out = np.zeros((n, t), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    with nogil:
        for r in range(n):
            row = r % t
            m = -INFINITY
            for j in range(t):
                if allowed[row, j] and x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(t):
                if allowed[row, j]:
                    y[r, j] = <real>exp(x[r, j] - m)
                    s += y[r, j]
            for j in range(t):
                if allowed[row, j]:
                    y[r, j] = <real>(y[r, j] / s)
    return out


def scatter_add_rows(real[:, ::1] out, const cnp.int64_t[::1] ids, const real[:, ::1] rows):
    cdef Py_ssize_t n = rows.shape[0], d = rows.shape[1], i, j, r
    with nogil:
        for i in range(n):
            r = ids[i]
            for j in range(d):
                out[r, j] += rows[i, j]
