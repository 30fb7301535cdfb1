"""Exponential-family log-likelihoods, size factors, and Poisson deviance.

Families: poisson (mean nu*lambda), negative_binomial (mean nu*lambda with a
per-feature dispersion phi_j; variance mu + mu^2/phi), gaussian (mean mu with
per-feature variance sigma_j^2). The batched term kernels used inside the
ELBO return the summed log-likelihood together with its derivative with
respect to the mean (and the per-feature auxiliary parameter where one
exists); they come in numba and numpy variants.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import backend
from .exceptions import DegenerateDataError, ParameterError, ShapeError

POISSON = "poisson"
NEGATIVE_BINOMIAL = "negative_binomial"
GAUSSIAN = "gaussian"

_FAMILY_ALIASES = {
    "poisson": POISSON,
    "poi": POISSON,
    "negative_binomial": NEGATIVE_BINOMIAL,
    "nb": NEGATIVE_BINOMIAL,
    "gaussian": GAUSSIAN,
    "gau": GAUSSIAN,
}

# Mean values are floored here inside the ELBO so that a factor collapsing
# to zero cannot produce -inf; gradients are masked where the floor binds.
MEAN_FLOOR = 1e-10

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LikelihoodSpec:
    """Observation model family plus per-feature auxiliary parameters.

    aux holds sigma_j^2 for gaussian and the dispersion phi_j for
    negative_binomial; it stays None for poisson.
    """

    family: str
    aux: np.ndarray | None = None

    def __post_init__(self):
        family = _FAMILY_ALIASES.get(self.family)
        if family is None:
            raise ParameterError(f"unknown likelihood family {self.family!r}")
        self.family = family
        if self.aux is not None:
            aux = np.asarray(self.aux, dtype=np.float64)
            if aux.ndim != 1:
                raise ShapeError("aux must be a 1-d per-feature array")
            if not np.all(np.isfinite(aux)) or np.any(aux <= 0.0):
                raise ParameterError("aux entries must be finite and > 0")
            self.aux = aux

    @property
    def needs_aux(self):
        return self.family != POISSON


def _check_count(y):
    if not math.isfinite(y) or y < 0 or y != math.floor(y):
        raise ParameterError(f"count observations must be nonnegative integers, got {y!r}")


def log_lik(spec, y, mean, j=0):
    """Log-likelihood of one observation under the given family.

    Parameters
    ----------
    spec : LikelihoodSpec
    y : observed value (nonnegative integer for count families).
    mean : nu*lambda for count families, mu for gaussian; must be > 0 for
        count families.
    j : feature index selecting the auxiliary parameter where one exists.
    """
    y = float(y)
    mean = float(mean)
    if spec.family == GAUSSIAN:
        if not math.isfinite(y):
            raise ParameterError("gaussian observations must be finite")
        sigma2 = float(spec.aux[j])
        return -0.5 * (_LOG_2PI + math.log(sigma2)) - (y - mean) ** 2 / (2.0 * sigma2)
    _check_count(y)
    if not math.isfinite(mean) or mean <= 0.0:
        raise ParameterError(f"count-family mean must be > 0, got {mean!r}")
    if spec.family == POISSON:
        return y * math.log(mean) - mean - math.lgamma(y + 1.0)
    phi = float(spec.aux[j])
    return (
        math.lgamma(y + phi)
        - math.lgamma(phi)
        - math.lgamma(y + 1.0)
        + phi * (math.log(phi) - math.log(phi + mean))
        + y * (math.log(mean) - math.log(phi + mean))
    )


def size_factors(Y):
    """Per-observation size factors nu_i = row total / median of row totals."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ShapeError("count matrix must be 2-dimensional")
    totals = Y.sum(axis=1)
    bad = np.nonzero(totals <= 0)[0]
    if bad.size:
        raise DegenerateDataError(
            f"observation {bad[0]} has zero total count; filter it before computing size factors"
        )
    return totals / np.median(totals)


def poisson_deviance(Y, Mhat):
    """Poisson deviance 2 sum[y log(y/mu) - (y - mu)] with 0*log(0) = 0."""
    Y = np.asarray(Y, dtype=np.float64)
    Mhat = np.asarray(Mhat, dtype=np.float64)
    if Y.shape != Mhat.shape:
        raise ShapeError(f"shape mismatch: {Y.shape} vs {Mhat.shape}")
    if np.any(Y < 0):
        raise ParameterError("observed counts must be nonnegative")
    if not np.all(np.isfinite(Mhat)) or np.any(Mhat <= 0):
        raise ParameterError("predicted means must be finite and > 0")
    pos = Y > 0
    term = np.zeros_like(Y)
    term[pos] = Y[pos] * np.log(Y[pos] / Mhat[pos])
    return float(2.0 * (term.sum() - (Y.sum() - Mhat.sum())))


# ---------------------------------------------------------------------------
# Batched term kernels for the ELBO. y has shape (B, J); mean has shape
# (S, B, J); the auxiliary parameter arrays have shape (J,). Each returns
# the total log-likelihood over all entries plus derivative arrays.
# The poisson kernel leaves out the -lgamma(y+1) constant, which the caller
# adds once per observation (it does not depend on the draws).


def _poisson_terms_loops(y, mean):
    S, B, J = mean.shape
    ll = 0.0
    dmean = np.empty((S, B, J))
    for s in range(S):
        for b in range(B):
            for j in range(J):
                m = mean[s, b, j]
                if m > MEAN_FLOOR:
                    ll += y[b, j] * math.log(m) - m
                    dmean[s, b, j] = y[b, j] / m - 1.0
                else:
                    ll += y[b, j] * math.log(MEAN_FLOOR) - MEAN_FLOOR
                    dmean[s, b, j] = 0.0
    return ll, dmean


def _poisson_terms_numpy(y, mean):
    live = mean > MEAN_FLOOR
    m = np.where(live, mean, MEAN_FLOOR)
    ll = float(np.sum(y[None, :, :] * np.log(m) - m))
    dmean = np.where(live, y[None, :, :] / m - 1.0, 0.0)
    return ll, dmean


def _digamma_scalar(x):
    # recurrence up into the asymptotic regime, then the standard series;
    # callers only pass x > 0
    acc = 0.0
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = (
        math.log(x)
        - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)))
    )
    return acc + series


def _np_digamma(x):
    return float(special.digamma(x))


digamma = backend.dispatch(_digamma_scalar, _np_digamma)


def _nb_terms_loops(y, mean, phi):
    S, B, J = mean.shape
    ll = 0.0
    dmean = np.empty((S, B, J))
    dphi = np.zeros(J)
    # gamma-function terms depend only on (b, j), never on the draw index
    for j in range(J):
        p = phi[j]
        logp = math.log(p)
        lgam_p = math.lgamma(p)
        dig_p = digamma(p)
        for b in range(B):
            yv = y[b, j]
            lgam_yp = math.lgamma(yv + p)
            lgam_y1 = math.lgamma(yv + 1.0)
            dig_yp = digamma(yv + p)
            for s in range(S):
                m = mean[s, b, j]
                live = m > MEAN_FLOOR
                if not live:
                    m = MEAN_FLOOR
                lpm = math.log(p + m)
                ll += (
                    lgam_yp
                    - lgam_p
                    - lgam_y1
                    + p * (logp - lpm)
                    + yv * (math.log(m) - lpm)
                )
                ratio = (yv + p) / (p + m)
                dmean[s, b, j] = yv / m - ratio if live else 0.0
                dphi[j] += dig_yp - dig_p + logp + 1.0 - lpm - ratio
    return ll, dmean, dphi


def _nb_terms_numpy(y, mean, phi):
    live = mean > MEAN_FLOOR
    m = np.where(live, mean, MEAN_FLOOR)
    p = phi[None, None, :]
    yb = y[None, :, :]
    lpm = np.log(p + m)
    ll = float(
        np.sum(
            special.gammaln(yb + p)
            - special.gammaln(p)
            - special.gammaln(yb + 1.0)
            + p * (np.log(p) - lpm)
            + yb * (np.log(m) - lpm)
        )
    )
    ratio = (yb + p) / (p + m)
    dmean = np.where(live, yb / m - ratio, 0.0)
    dphi = np.sum(
        special.digamma(yb + p) - special.digamma(p) + np.log(p) + 1.0 - lpm - ratio,
        axis=(0, 1),
    )
    return ll, dmean, dphi


def _gaussian_terms_loops(y, mean, sigma2):
    S, B, J = mean.shape
    ll = 0.0
    dmean = np.empty((S, B, J))
    dlogsig2 = np.zeros(J)
    for s in range(S):
        for b in range(B):
            for j in range(J):
                s2 = sigma2[j]
                resid = y[b, j] - mean[s, b, j]
                q = resid * resid / (2.0 * s2)
                ll += -0.5 * (_LOG_2PI + math.log(s2)) - q
                dmean[s, b, j] = resid / s2
                dlogsig2[j] += -0.5 + q
    return ll, dmean, dlogsig2


def _gaussian_terms_numpy(y, mean, sigma2):
    s2 = sigma2[None, None, :]
    resid = y[None, :, :] - mean
    q = resid * resid / (2.0 * s2)
    ll = float(np.sum(-0.5 * (_LOG_2PI + np.log(s2)) - q))
    dmean = resid / s2
    dlogsig2 = np.sum(q - 0.5, axis=(0, 1))
    return ll, dmean, dlogsig2


poisson_terms = backend.dispatch(_poisson_terms_loops, _poisson_terms_numpy)
nb_terms = backend.dispatch(_nb_terms_loops, _nb_terms_numpy)
gaussian_terms = backend.dispatch(_gaussian_terms_loops, _gaussian_terms_numpy)
