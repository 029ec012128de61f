"""Numpy reference implementations of the compiled kernels."""

import numpy as np
from scipy.special import expit, xlogy

MU_EPS = 1e-10


def irls_accumulate(X, eta, y, w, logit):
    """Return ``(X'VX, X'Vz, deviance)`` evaluated at ``eta``."""
    if logit:
        mu = np.clip(expit(eta), MU_EPS, 1.0 - MU_EPS)
        var = mu * (1.0 - mu)
        v = w * var
        z = eta + (y - mu) / var
        dev = 2.0 * np.sum(w * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu))))
    else:
        v = w
        z = y
        dev = float(np.sum(w * (y - eta) ** 2))
    Xv = X * v[:, None]
    return Xv.T @ X, Xv.T @ z, float(dev)


def cell_sums(codes, y, w, n_cells):
    """Weighted response sums and weight totals per integer cell code."""
    swy = np.bincount(codes, weights=w * y, minlength=n_cells)
    sw = np.bincount(codes, weights=w, minlength=n_cells)
    return swy, sw
