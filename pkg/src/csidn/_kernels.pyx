# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled forward-correction kernels. Semantics match ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()

DEF MAXK = 256


cdef inline void _backprop_row(const double[:] p, double* dp, double[:] out, Py_ssize_t K) noexcept nogil:
    cdef Py_ssize_t j
    cdef double s = 0.0
    for j in range(K):
        s += dp[j] * p[j]
    for j in range(K):
        out[j] = p[j] * (dp[j] - s)


def corrected_loss_grad(probs, labels, T, double eps=1e-12):
    cdef const double[:, :] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const cnp.intp_t[:] y = np.ascontiguousarray(labels, dtype=np.intp)
    cdef const double[:, :, :] t = np.ascontiguousarray(T, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], K = p.shape[1], s, i, lab
    if K > MAXK:
        raise ValueError("too many classes for compiled kernel")
    losses_arr = np.empty(n, dtype=np.float64)
    grad_arr = np.empty((n, K), dtype=np.float64)
    cdef double[:] losses = losses_arr
    cdef double[:, :] grad = grad_arr
    cdef double dp[MAXK]
    cdef double qy
    with nogil:
        for s in range(n):
            lab = y[s]
            qy = 0.0
            for i in range(K):
                qy += t[s, i, lab] * p[s, i]
            if qy >= eps:
                losses[s] = -log(qy)
                for i in range(K):
                    dp[i] = -t[s, i, lab] / qy
            else:
                losses[s] = -log(eps)
                for i in range(K):
                    dp[i] = 0.0
            _backprop_row(p[s], dp, grad[s], K)
    return losses_arr, grad_arr


def ilfc_loss_grad(probs, labels, r, beta, mu, alpha, double floor=1e-3, double eps=1e-12):
    cdef const double[:, :] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const cnp.intp_t[:] y = np.ascontiguousarray(labels, dtype=np.intp)
    cdef const double[:] rr = np.ascontiguousarray(r, dtype=np.float64)
    cdef const double[:] bb = np.ascontiguousarray(beta, dtype=np.float64)
    cdef const double[:] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, :] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], K = p.shape[1], s, i, lab
    if K > MAXK:
        raise ValueError("too many classes for compiled kernel")
    losses_arr = np.empty(n, dtype=np.float64)
    grad_arr = np.empty((n, K), dtype=np.float64)
    cdef double[:] losses = losses_arr
    cdef double[:, :] grad = grad_arr
    cdef double dp[MAXK]
    cdef double col[MAXK]
    cdef double d, qy
    with nogil:
        for s in range(n):
            lab = y[s]
            # column `lab` of T(x): diagonal entry on row lab, alpha-scaled elsewhere
            for i in range(K):
                if i == lab:
                    d = rr[s] * bb[s]
                    if d < floor:
                        d = floor
                    elif d > 1.0:
                        d = 1.0
                    col[i] = d
                else:
                    col[i] = a[i, lab] * (1.0 - m[i])
            qy = 0.0
            for i in range(K):
                qy += col[i] * p[s, i]
            if qy >= eps:
                losses[s] = -log(qy)
                for i in range(K):
                    dp[i] = -col[i] / qy
            else:
                losses[s] = -log(eps)
                for i in range(K):
                    dp[i] = 0.0
            _backprop_row(p[s], dp, grad[s], K)
    return losses_arr, grad_arr


def assemble_stack(labels, r, beta, mu, alpha, double floor=1e-3):
    cdef const cnp.intp_t[:] y = np.ascontiguousarray(labels, dtype=np.intp)
    cdef const double[:] rr = np.ascontiguousarray(r, dtype=np.float64)
    cdef const double[:] bb = np.ascontiguousarray(beta, dtype=np.float64)
    cdef const double[:] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, :] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef Py_ssize_t n = y.shape[0], K = m.shape[0], s, i, j
    out_arr = np.empty((n, K, K), dtype=np.float64)
    cdef double[:, :, :] out = out_arr
    cdef double d
    with nogil:
        for s in range(n):
            for i in range(K):
                if i == y[s]:
                    d = rr[s] * bb[s]
                    if d < floor:
                        d = floor
                    elif d > 1.0:
                        d = 1.0
                else:
                    d = m[i]
                for j in range(K):
                    out[s, i, j] = d if i == j else a[i, j] * (1.0 - d)
    return out_arr


def ece_bins(confidences, correct, int n_bins):
    cdef const double[:] c = np.ascontiguousarray(confidences, dtype=np.float64)
    cdef const double[:] ok = np.ascontiguousarray(correct, dtype=np.float64)
    counts_arr = np.zeros(n_bins, dtype=np.float64)
    conf_arr = np.zeros(n_bins, dtype=np.float64)
    acc_arr = np.zeros(n_bins, dtype=np.float64)
    cdef double[:] counts = counts_arr
    cdef double[:] conf = conf_arr
    cdef double[:] acc = acc_arr
    cdef Py_ssize_t s, b
    with nogil:
        for s in range(c.shape[0]):
            b = <Py_ssize_t>(c[s] * n_bins)
            if b > n_bins - 1:
                b = n_bins - 1
            counts[b] += 1.0
            conf[b] += c[s]
            acc[b] += ok[s]
    return counts_arr, conf_arr, acc_arr
