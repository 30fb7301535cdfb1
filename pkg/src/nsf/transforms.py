"""Smooth reparameterizations and shared variational formulas.

Positive quantities are optimized on the log scale; the positive diagonal
of each Omega Cholesky factor goes through a softplus bijection so the raw
parameterization stays unconstrained.
"""

import numpy as np
from scipy.special import expit as sigmoid  # noqa: F401  (re-exported)


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for y > 0: y + log(1 - exp(-y))."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def omega_chol_from_raw(raw):
    """Constrained lower Cholesky factor from an unconstrained square array.

    Strictly-lower entries pass through; the diagonal is softplus-mapped so
    it stays positive. The upper triangle of raw is ignored.
    """
    C = np.tril(raw, -1)
    idx = np.arange(raw.shape[0])
    C[idx, idx] = softplus(raw[idx, idx])
    return C


def omega_raw_from_chol(C):
    """Unconstrained parameterization of a positive-diagonal lower factor."""
    raw = np.tril(C, -1)
    idx = np.arange(C.shape[0])
    raw[idx, idx] = softplus_inv(C[idx, idx])
    return raw


def kl_meanfield_matrix(delta, log_omega, prior_mean, prior_log_var):
    """Entrywise KL( N(delta, omega) || N(m, s2) ) for mean-field factors.

    Shapes: delta and log_omega (n, K); prior_mean and prior_log_var (K,).
    Returns an (n, K) array of 0.5 [log(s2/omega) - 1 + omega/s2 + (delta-m)^2/s2].
    """
    s2 = np.exp(prior_log_var)[None, :]
    omega = np.exp(log_omega)
    dd = delta - prior_mean[None, :]
    return 0.5 * (prior_log_var[None, :] - log_omega - 1.0 + (omega + dd * dd) / s2)
