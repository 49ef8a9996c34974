# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Mirrors _numpy_impl semantics on C-contiguous f64 arrays."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def row_softmax(double[:, ::1] x, double tau):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double zmax, s, z
    for i in range(rows):
        zmax = x[i, 0] / tau
        for j in range(1, cols):
            z = x[i, j] / tau
            if z > zmax:
                zmax = z
        s = 0.0
        for j in range(cols):
            z = exp(x[i, j] / tau - zmax)
            o[i, j] = z
            s += z
        for j in range(cols):
            o[i, j] /= s
    return out


def row_log_softmax(double[:, ::1] x, double tau):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double zmax, s, z, lse
    for i in range(rows):
        zmax = x[i, 0] / tau
        for j in range(1, cols):
            z = x[i, j] / tau
            if z > zmax:
                zmax = z
        s = 0.0
        for j in range(cols):
            z = x[i, j] / tau - zmax
            o[i, j] = z
            s += exp(z)
        lse = log(s)
        for j in range(cols):
            o[i, j] -= lse
    return out


def softmax_grad_z(double[:, ::1] p, double[:, ::1] g):
    cdef Py_ssize_t rows = p.shape[0], cols = p.shape[1]
    out = np.empty((rows, cols))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += g[i, j] * p[i, j]
        for j in range(cols):
            o[i, j] = p[i, j] * (g[i, j] - dot)
    return out


def log_softmax_grad_z(double[:, ::1] lp, double[:, ::1] g):
    cdef Py_ssize_t rows = lp.shape[0], cols = lp.shape[1]
    out = np.empty((rows, cols))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double gsum
    for i in range(rows):
        gsum = 0.0
        for j in range(cols):
            gsum += g[i, j]
        for j in range(cols):
            o[i, j] = g[i, j] - exp(lp[i, j]) * gsum
    return out


def row_l2_norms(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty(rows)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(rows):
        s = 0.0
        for j in range(cols):
            s += x[i, j] * x[i, j]
        o[i] = sqrt(s)
    return out


def row_l2_normalize_grad(double[:, ::1] y, double[::1] norms, double[:, ::1] g):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    out = np.empty((rows, cols))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += g[i, j] * y[i, j]
        for j in range(cols):
            o[i, j] = (g[i, j] - y[i, j] * dot) / norms[i]
    return out


def kl_rows_mean(double[:, ::1] p, double[:, ::1] logq):
    cdef Py_ssize_t rows = p.shape[0], cols = p.shape[1]
    cdef Py_ssize_t i, j
    cdef double total = 0.0
    for i in range(rows):
        for j in range(cols):
            if p[i, j] > 0.0:
                total += p[i, j] * (log(p[i, j]) - logq[i, j])
    return total / rows


def ema_update(double[::1] k, double[::1] q, double m):
    cdef Py_ssize_t n = k.shape[0]
    cdef double omm = 1.0 - m
    cdef Py_ssize_t i
    for i in range(n):
        k[i] = m * k[i] + omm * q[i]


def adamw_update(
    double[::1] w,
    double[::1] g,
    double[::1] m,
    double[::1] v,
    double lr,
    double beta1,
    double beta2,
    double bc1,
    double bc2,
    double eps,
    double wd,
):
    cdef Py_ssize_t n = w.shape[0]
    cdef double omb1 = 1.0 - beta1
    cdef double omb2 = 1.0 - beta2
    cdef double lrwd = lr * wd
    cdef double mh, vh
    cdef Py_ssize_t i
    for i in range(n):
        m[i] = beta1 * m[i] + omb1 * g[i]
        v[i] = beta2 * v[i] + omb2 * (g[i] * g[i])
        mh = m[i] / bc1
        vh = v[i] / bc2
        w[i] = w[i] - (lrwd * w[i] + (lr * mh) / (sqrt(vh) + eps))
