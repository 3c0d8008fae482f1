# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops for the 1-D forward model.

Mirrors ``_pykernels`` exactly; see that module for the contracts.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def tridiag_solve(const double[::1] lower, const double[::1] diag,
                  const double[::1] upper, const double[::1] rhs):
    cdef Py_ssize_t k = diag.shape[0]
    cdef Py_ssize_t i
    cdef double denom
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x = np.empty(k)
    cdef double[::1] c = np.empty(k)
    cdef double[::1] d = np.empty(k)
    if k == 0:
        return x
    c[0] = upper[0] / diag[0] if k > 1 else 0.0
    d[0] = rhs[0] / diag[0]
    for i in range(1, k):
        denom = diag[i] - lower[i - 1] * c[i - 1]
        if i < k - 1:
            c[i] = upper[i] / denom
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom
    x[k - 1] = d[k - 1]
    for i in range(k - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def overlap_means(const double[::1] coeffs, Py_ssize_t m):
    cdef Py_ssize_t n = coeffs.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(m)
    cdef Py_ssize_t j = 0, e = 0
    cdef long long pos = 0, cell_end, elem_end, nxt
    while e < m and j < n:
        cell_end = (j + 1) * m
        elem_end = (e + 1) * n
        nxt = cell_end if cell_end < elem_end else elem_end
        out[e] += coeffs[j] * (nxt - pos)
        pos = nxt
        if pos == cell_end:
            j += 1
        if pos == elem_end:
            e += 1
    for e in range(m):
        out[e] /= n
    return out


def overlap_accumulate(const double[::1] q, Py_ssize_t n):
    cdef Py_ssize_t m = q.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(n)
    cdef Py_ssize_t j = 0, e = 0
    cdef long long pos = 0, cell_end, elem_end, nxt
    cdef double scale = 1.0 / (<double> n * <double> m)
    while e < m and j < n:
        cell_end = (j + 1) * m
        elem_end = (e + 1) * n
        nxt = cell_end if cell_end < elem_end else elem_end
        out[j] += q[e] * (nxt - pos) * scale
        pos = nxt
        if pos == cell_end:
            j += 1
        if pos == elem_end:
            e += 1
    return out
