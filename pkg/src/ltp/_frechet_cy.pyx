# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled inner loop for the discrete Fréchet distance.

Runs the coupling-lattice recurrence over two point sequences with a
rolling row, so memory stays O(m) no matter how long the polylines are.
"""

from libc.math cimport sqrt

import numpy as np


cdef inline double _point_dist(double[:, ::1] a, double[:, ::1] b,
                               Py_ssize_t i, Py_ssize_t j, Py_ssize_t d) nogil:
    cdef double acc = 0.0
    cdef double diff
    cdef Py_ssize_t k
    for k in range(d):
        diff = a[i, k] - b[j, k]
        acc += diff * diff
    return sqrt(acc)


def dp_frechet(double[:, ::1] a, double[:, ::1] b):
    """Discrete Fréchet distance between point sequences ``a`` and ``b``.

    Both arguments must be C-contiguous float64 arrays of shape (n, d)
    with matching d and n >= 1.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t d = a.shape[1]
    cdef Py_ssize_t i, j
    cdef double dist, best, diag, up

    row_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] row = row_arr

    with nogil:
        # first row: running max of d(a_0, b_j)
        row[0] = _point_dist(a, b, 0, 0, d)
        for j in range(1, m):
            dist = _point_dist(a, b, 0, j, d)
            row[j] = row[j - 1] if row[j - 1] > dist else dist

        for i in range(1, n):
            diag = row[0]
            dist = _point_dist(a, b, i, 0, d)
            row[0] = diag if diag > dist else dist
            for j in range(1, m):
                up = row[j]
                best = up
                if diag < best:
                    best = diag
                if row[j - 1] < best:
                    best = row[j - 1]
                dist = _point_dist(a, b, i, j, d)
                row[j] = best if best > dist else dist
                diag = up

    return row[m - 1]
