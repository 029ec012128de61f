# cython: language_level=3
"""Compiled inner loop for iteratively reweighted least squares.

One fused pass over the rows builds the weighted normal equations and the
deviance at the current linear predictor, without materialising the
n x p working-weighted design that the numpy path allocates.
"""
from libc.math cimport exp, log

import numpy as np

cdef double MU_EPS = 1e-10


cdef inline double _xlogy_ratio(double y, double mu) nogil:
    if y <= 0.0:
        return 0.0
    return y * log(y / mu)


def irls_accumulate(const double[:, ::1] X, const double[::1] eta,
                    const double[::1] y, const double[::1] w, bint logit):
    """Return ``(X'VX, X'Vz, deviance)`` evaluated at ``eta``."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    gram_arr = np.zeros((p, p), dtype=np.float64)
    rhs_arr = np.zeros(p, dtype=np.float64)
    cdef double[:, ::1] gram = gram_arr
    cdef double[::1] rhs = rhs_arr
    cdef double dev = 0.0
    cdef double mu, var, v, z, xv, wi, yi
    cdef Py_ssize_t i, j, k

    with nogil:
        for i in range(n):
            wi = w[i]
            if wi == 0.0:
                continue
            yi = y[i]
            if logit:
                mu = 1.0 / (1.0 + exp(-eta[i]))
                if mu < MU_EPS:
                    mu = MU_EPS
                elif mu > 1.0 - MU_EPS:
                    mu = 1.0 - MU_EPS
                var = mu * (1.0 - mu)
                v = wi * var
                z = eta[i] + (yi - mu) / var
                dev += 2.0 * wi * (_xlogy_ratio(yi, mu)
                                   + _xlogy_ratio(1.0 - yi, 1.0 - mu))
            else:
                v = wi
                z = yi
                dev += wi * (yi - eta[i]) * (yi - eta[i])
            for j in range(p):
                xv = X[i, j] * v
                rhs[j] += xv * z
                for k in range(j + 1):
                    gram[j, k] += xv * X[i, k]
        for j in range(p):
            for k in range(j):
                gram[k, j] = gram[j, k]
    return gram_arr, rhs_arr, dev


def cell_sums(const long[::1] codes, const double[::1] y,
              const double[::1] w, Py_ssize_t n_cells):
    """Weighted response sums and weight totals per integer cell code."""
    sw_arr = np.zeros(n_cells, dtype=np.float64)
    swy_arr = np.zeros(n_cells, dtype=np.float64)
    cdef double[::1] sw = sw_arr
    cdef double[::1] swy = swy_arr
    cdef Py_ssize_t i, c
    with nogil:
        for i in range(codes.shape[0]):
            c = codes[i]
            sw[c] += w[i]
            swy[c] += w[i] * y[i]
    return swy_arr, sw_arr
