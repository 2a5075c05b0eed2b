# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels: layer norm, tanh-GELU and tempered softmax.

Reductions run left to right over each row, so results are reproducible
bit for bit for a given input.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, tanh, exp

cnp.import_array()

cdef double GELU_K = 0.7978845608028654
cdef double GELU_C = 0.044715


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma,
                   const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu = mu + x[i, j]
            mu = mu / d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var = var + c * c
            var = var / d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = c
                y[i, j] = c * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    dx_arr = np.empty((n, d), dtype=np.float64)
    dgamma_arr = np.zeros(d, dtype=np.float64)
    dbeta_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double s1, s2, gx
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                gx = g[i, j] * gamma[j]
                s1 = s1 + gx
                s2 = s2 + gx * xhat[i, j]
                dgamma[j] = dgamma[j] + g[i, j] * xhat[i, j]
                dbeta[j] = dbeta[j] + g[i, j]
            s1 = s1 / d
            s2 = s2 / d
            for j in range(d):
                dx[i, j] = rstd[i] * (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return dx_arr, dgamma_arr, dbeta_arr


cdef inline double _tanh(double z) nogil:
    # exp-based form is several times faster than libm tanh here
    if z > 20.0:
        return 1.0
    if z < -20.0:
        return -1.0
    return 1.0 - 2.0 / (1.0 + exp(2.0 * z))


def gelu_fwd(const double[:, ::1] x):
    """Return ``(gelu(x), t)`` where ``t`` is the inner tanh, saved for backward."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d), dtype=np.float64)
    t_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] t = t_arr
    cdef double v, th
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                th = _tanh(GELU_K * (v + GELU_C * v * v * v))
                t[i, j] = th
                y[i, j] = 0.5 * v * (1.0 + th)
    return y_arr, t_arr


def gelu_bwd(const double[:, ::1] g, const double[:, ::1] x, const double[:, ::1] t):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double v, th, dt
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                th = t[i, j]
                dt = (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)
                dx[i, j] = g[i, j] * (0.5 * (1.0 + th) + 0.5 * v * dt)
    return dx_arr


def softmax_fwd(const double[:, ::1] x, double inv_temp):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double m, s, e
    with nogil:
        for i in range(n):
            m = x[i, 0] * inv_temp
            for j in range(1, d):
                if x[i, j] * inv_temp > m:
                    m = x[i, j] * inv_temp
            s = 0.0
            for j in range(d):
                e = exp(x[i, j] * inv_temp - m)
                y[i, j] = e
                s = s + e
            for j in range(d):
                y[i, j] = y[i, j] / s
    return y_arr


def softmax_bwd(const double[:, ::1] g, const double[:, ::1] y, double inv_temp):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    dx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s = s + g[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = inv_temp * y[i, j] * (g[i, j] - s)
    return dx_arr
