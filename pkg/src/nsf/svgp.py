"""Per-component sparse variational Gaussian process machinery.

A spatial component keeps M inducing locations Z, a Gaussian variational
distribution q(u) = N(delta, Omega) over the function values at Z
(parameterized by the lower Cholesky factor of Omega), and a linear prior
mean mu(x) = beta0 + x @ beta1. Marginalizing u gives closed-form per-point
posterior moments

    mean_i = mu(x_i) + alpha_i' (delta - mu(Z))
    var_i  = k(x_i, x_i) - alpha_i' (Kuu - Omega) alpha_i

with alpha_i = Kuu^-1 [Kuf]_{:, i}, computed here via triangular solves
against the jittered Cholesky factor of Kuu.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import ParameterError, ShapeError
from .kernels import KernelParams, chol_with_jitter, cross_cov

_KMEANS_RESTARTS = 10
_KMEANS_MAX_ITER = 100


@dataclass
class SpatialComponentState:
    """Variational state of one spatial component.

    Z is frozen after initialization; only delta, omega_chol, beta0, beta1,
    and the kernel hyperparameters are optimized.
    """

    Z: np.ndarray
    delta: np.ndarray
    omega_chol: np.ndarray
    beta0: float
    beta1: np.ndarray
    kernel: KernelParams

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64).ravel()
        self.omega_chol = np.asarray(self.omega_chol, dtype=np.float64)
        self.beta0 = float(self.beta0)
        self.beta1 = np.asarray(self.beta1, dtype=np.float64).ravel()
        M, D = self.Z.shape
        if self.delta.shape != (M,):
            raise ShapeError(f"delta must have shape ({M},), got {self.delta.shape}")
        if self.omega_chol.shape != (M, M):
            raise ShapeError(f"omega_chol must be {M}x{M}, got {self.omega_chol.shape}")
        if self.beta1.shape != (D,):
            raise ShapeError(f"beta1 must have shape ({D},), got {self.beta1.shape}")
        if np.any(np.diag(self.omega_chol) <= 0.0):
            raise ParameterError("omega_chol must have a strictly positive diagonal")
        if np.any(np.triu(self.omega_chol, 1) != 0.0):
            raise ParameterError("omega_chol must be lower triangular")

    def prior_mean(self, X):
        return self.beta0 + np.asarray(X, dtype=np.float64) @ self.beta1


@dataclass
class MarginalPosterior:
    """Per-point posterior moments of one component's factor values."""

    mean: np.ndarray
    variance: np.ndarray


def choose_inducing_points(X, M, seed=0):
    """Select M inducing locations from N data coordinates.

    M = N returns X verbatim; otherwise the centroids of Lloyd's k-means
    (squared-Euclidean objective, 10 seeded restarts, up to 100 iterations,
    empty clusters reseeded to the farthest point).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("coordinates must be 2-dimensional")
    N = X.shape[0]
    if not 1 <= M <= N:
        raise ParameterError(f"M must satisfy 1 <= M <= {N}, got {M}")
    if M == N:
        return X.copy()
    rng = np.random.default_rng(seed)
    best = None
    best_inertia = np.inf
    for _ in range(_KMEANS_RESTARTS):
        centers, inertia = _lloyd(X, M, rng)
        if inertia < best_inertia:
            best, best_inertia = centers, inertia
    return best


def _sq_dists(X, centers):
    sq = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(centers * centers, axis=1)[None, :]
        - 2.0 * (X @ centers.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return sq

def _lloyd(X, M, rng):
    N = X.shape[0]
    centers = X[rng.choice(N, size=M, replace=False)].copy()
    for _ in range(_KMEANS_MAX_ITER):
        sq = _sq_dists(X, centers)
        labels = np.argmin(sq, axis=1)
        new_centers = np.empty_like(centers)
        taken = np.min(sq, axis=1)
        for m in range(M):
            members = labels == m
            if members.any():
                new_centers[m] = X[members].mean(axis=0)
            else:
                # reseed to the currently worst-fit point
                far = int(np.argmax(taken))
                new_centers[m] = X[far]
                taken[far] = -np.inf
        if np.max(np.abs(new_centers - centers)) < 1e-12:
            centers = new_centers
            break
        centers = new_centers
    sq = _sq_dists(X, centers)
    return centers, float(np.min(sq, axis=1).sum())


def marginal_posterior(state, Xb):
    """Posterior mean and variance of the factor at query coordinates Xb."""
    Xb = np.atleast_2d(np.asarray(Xb, dtype=np.float64))
    if Xb.shape[1] != state.Z.shape[1]:
        raise ShapeError(
            f"query dimension {Xb.shape[1]} does not match inducing dimension {state.Z.shape[1]}"
        )
    amp2 = state.kernel.amplitude**2
    Kuu = cross_cov(state.kernel, state.Z, state.Z)
    L, _ = chol_with_jitter(Kuu, scale=amp2)
    Kuf = cross_cov(state.kernel, state.Z, Xb)
    B = solve_triangular(L, Kuf, lower=True)
    A = solve_triangular(L, B, trans="T", lower=True)
    R = state.omega_chol.T @ A
    d = state.delta - state.prior_mean(state.Z)
    mean = state.prior_mean(Xb) + A.T @ d
    var = amp2 - np.sum(B * B, axis=0) + np.sum(R * R, axis=0)
    np.maximum(var, 0.0, out=var)
    return MarginalPosterior(mean=mean, variance=var)


def kl_inducing(state):
    """KL(q(u) || p(u)) in closed form.

    0.5 [ log|Kuu|/|Omega| - M + tr(Kuu^-1 Omega) + d' Kuu^-1 d ]
    with d = delta - mu(Z).
    """
    amp2 = state.kernel.amplitude**2
    Kuu = cross_cov(state.kernel, state.Z, state.Z)
    L, _ = chol_with_jitter(Kuu, scale=amp2)
    C = state.omega_chol
    S1 = solve_triangular(L, C, lower=True)
    d = state.delta - state.prior_mean(state.Z)
    half = solve_triangular(L, d, lower=True)
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(L))))
    logdet_o = 2.0 * float(np.sum(np.log(np.diag(C))))
    M = state.Z.shape[0]
    return 0.5 * (logdet_k - logdet_o - M + float(np.sum(S1 * S1)) + float(half @ half))


def sample_factor(post, S, seed=0):
    """S reparameterized draws mean + sqrt(variance) * eps, eps ~ N(0, I)."""
    if S < 1:
        raise ParameterError(f"S must be >= 1, got {S}")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((S, post.mean.shape[0]))
    return post.mean[None, :] + np.sqrt(post.variance)[None, :] * eps
