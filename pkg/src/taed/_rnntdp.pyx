# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled transducer-lattice forward-backward kernel.

Works on log-softmaxed joiner outputs ``lp[t, u, k]`` (t: encoder frame,
u: target tokens consumed, k: vocabulary plus blank).  Computes the negative
log-likelihood over all monotone emit/advance paths and its gradient with
respect to ``lp`` via the alpha/beta occupancy recursion.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, isinf, log1p

cnp.import_array()

NEG_INF = -np.inf

cdef double C_NEG_INF = -INFINITY


cdef inline double _lse2(double a, double b) noexcept nogil:
    cdef double hi, lo
    if a > b:
        hi = a
        lo = b
    else:
        hi = b
        lo = a
    if isinf(hi) and hi < 0:
        return hi
    return hi + log1p(exp(lo - hi))


def forward_backward(double[:, :, ::1] lp, long[::1] labels, Py_ssize_t blank):
    """Return (negative log-likelihood, gradient w.r.t. lp)."""
    cdef Py_ssize_t T = lp.shape[0]
    cdef Py_ssize_t U1 = lp.shape[1]
    cdef Py_ssize_t U = U1 - 1
    cdef Py_ssize_t t, u
    cdef double emit, blk, log_z, occ

    alpha_arr = np.full((T, U1), NEG_INF)
    beta_arr = np.full((T, U1), NEG_INF)
    grad_arr = np.zeros((T, U1, lp.shape[2]))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, :, ::1] grad = grad_arr

    with nogil:
        alpha[0, 0] = 0.0
        for t in range(T):
            for u in range(U1):
                if t == 0 and u == 0:
                    continue
                emit = alpha[t, u - 1] + lp[t, u - 1, labels[u - 1]] if u > 0 else C_NEG_INF
                blk = alpha[t - 1, u] + lp[t - 1, u, blank] if t > 0 else C_NEG_INF
                alpha[t, u] = _lse2(emit, blk)

        beta[T - 1, U] = lp[T - 1, U, blank]
        for t in range(T - 1, -1, -1):
            for u in range(U, -1, -1):
                if t == T - 1 and u == U:
                    continue
                emit = lp[t, u, labels[u]] + beta[t, u + 1] if u < U else C_NEG_INF
                blk = lp[t, u, blank] + beta[t + 1, u] if t < T - 1 else C_NEG_INF
                beta[t, u] = _lse2(emit, blk)

        log_z = beta[0, 0]

        # d(-log Z)/d lp[t,u,k] = -(posterior mass of transitions using that entry)
        for t in range(T):
            for u in range(U1):
                if u < U:
                    occ = alpha[t, u] + lp[t, u, labels[u]] + beta[t, u + 1] - log_z
                    grad[t, u, labels[u]] -= exp(occ)
                if t < T - 1:
                    occ = alpha[t, u] + lp[t, u, blank] + beta[t + 1, u] - log_z
                    grad[t, u, blank] -= exp(occ)
        grad[T - 1, U, blank] -= exp(alpha[T - 1, U] + lp[T - 1, U, blank] - log_z)

    return -log_z, grad_arr


def alpha_grid(double[:, :, ::1] lp, long[::1] labels, Py_ssize_t blank):
    """Forward scores only; returned as a [T, U+1] array."""
    cdef Py_ssize_t T = lp.shape[0]
    cdef Py_ssize_t U1 = lp.shape[1]
    cdef Py_ssize_t t, u
    cdef double emit, blk

    alpha_arr = np.full((T, U1), NEG_INF)
    cdef double[:, ::1] alpha = alpha_arr
    with nogil:
        alpha[0, 0] = 0.0
        for t in range(T):
            for u in range(U1):
                if t == 0 and u == 0:
                    continue
                emit = alpha[t, u - 1] + lp[t, u - 1, labels[u - 1]] if u > 0 else C_NEG_INF
                blk = alpha[t - 1, u] + lp[t - 1, u, blank] if t > 0 else C_NEG_INF
                alpha[t, u] = _lse2(emit, blk)
    return alpha_arr
