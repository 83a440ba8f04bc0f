# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot array kernels (see _npkernels for the contract)."""

import numpy as np

from libc.math cimport exp, log, fabs


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, j
    cdef double aip
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out_arr


def matmul_nt(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    out_arr = np.empty((m, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc
    return out_arr


def matmul_tn(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double api
    for p in range(k):
        for i in range(m):
            api = a[p, i]
            for j in range(n):
                out[i, j] += api * b[p, j]
    return out_arr


def softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            out[i, j] = exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(n):
            out[i, j] /= s
    return out_arr


def logsumexp_rows(const double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty(m)
    cdef double[:] out = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            s += exp(x[i, j] - mx)
        out[i] = mx + log(s)
    return out_arr


def logsumexp_cols(const double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty(n)
    cdef double[:] out = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, s
    for j in range(n):
        mx = x[0, j]
        for i in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for i in range(m):
            s += exp(x[i, j] - mx)
        out[j] = mx + log(s)
    return out_arr


def sinkhorn_potentials(const double[:, ::1] S, const double[:] loga, const double[:] logb,
                        int max_iters, double tol, bint last_row):
    cdef Py_ssize_t n = S.shape[0], m = S.shape[1]
    u_arr = np.zeros(n)
    v_arr = np.zeros(m)
    hist_arr = np.empty(max_iters)
    colsum_arr = np.empty(m)
    cdef double[:] u = u_arr, v = v_arr, hist = hist_arr, colsum = colsum_arr
    cdef Py_ssize_t i, j, k
    cdef int done = 0
    cdef double mx, s, err, d, p, rowsum

    for k in range(max_iters):
        if last_row:
            _update_cols(S, u, v, logb)
            _update_rows(S, u, v, loga)
        else:
            _update_rows(S, u, v, loga)
            _update_cols(S, u, v, logb)

        err = 0.0
        for j in range(m):
            colsum[j] = 0.0
        for i in range(n):
            rowsum = 0.0
            for j in range(m):
                p = exp(S[i, j] + u[i] + v[j])
                rowsum += p
                colsum[j] += p
            d = fabs(rowsum - exp(loga[i]))
            if d > err:
                err = d
        for j in range(m):
            d = fabs(colsum[j] - exp(logb[j]))
            if d > err:
                err = d
        hist[k] = err
        done = k + 1
        if tol > 0.0 and err < tol:
            break
    return u_arr, v_arr, hist_arr[:done]


cdef void _update_rows(const double[:, ::1] S, double[:] u, double[:] v,
                       const double[:] loga) noexcept:
    cdef Py_ssize_t n = S.shape[0], m = S.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s, val
    for i in range(n):
        mx = S[i, 0] + v[0]
        for j in range(1, m):
            val = S[i, j] + v[j]
            if val > mx:
                mx = val
        s = 0.0
        for j in range(m):
            s += exp(S[i, j] + v[j] - mx)
        u[i] = loga[i] - (mx + log(s))


cdef void _update_cols(const double[:, ::1] S, double[:] u, double[:] v,
                       const double[:] logb) noexcept:
    cdef Py_ssize_t n = S.shape[0], m = S.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s, val
    for j in range(m):
        mx = S[0, j] + u[0]
        for i in range(1, n):
            val = S[i, j] + u[i]
            if val > mx:
                mx = val
        s = 0.0
        for i in range(n):
            s += exp(S[i, j] + u[i] - mx)
        v[j] = logb[j] - (mx + log(s))
