"""Starting values: factor/loading decompositions and spatial ordering.

Real-valued models start from a truncated SVD; nonnegative models from
multiplicative-update NMF (KL divergence) seeded by a nonnegative
double-SVD. Hybrid models rank the initial factor columns by Moran's I
on a symmetrized binary kNN graph so the most autocorrelated columns
become the spatial block.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.spatial import cKDTree

from .exceptions import DegenerateDataError, ParameterError, ShapeError

LOG_FLOOR = 1e-8
OMEGA_INIT_SCALE = 0.01
MF_OMEGA_INIT = 0.01
LENGTHSCALE_FRACTION = 0.1

_NMF_ITERS = 200
_TINY = 1e-12


@dataclass(frozen=True)
class SpatialGraphConfig:
    """Weights graph for autocorrelation: binary, k nearest neighbors."""

    k: int = 6

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")


def init_factors(mat, L, nonnegative, seed=0):
    """Rank-L starting decomposition mat ~ F0 @ W0.T, shapes (N,L), (J,L).

    seed is accepted for interface stability; both branches are
    deterministic in the input.
    """
    A = np.asarray(mat, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeError("expected a 2-d matrix")
    N, J = A.shape
    L = int(L)
    if not 1 <= L <= min(N, J):
        raise ParameterError(f"L must lie in [1, {min(N, J)}], got {L}")
    if not nonnegative:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        return U[:, :L] * s[:L], Vt[:L].T.copy()
    if A.min() < 0:
        raise ParameterError("nonnegative initialization requires nonnegative data")
    F, H = _nndsvda(A, L)
    F, H = _nmf_kl(A, F, H, _NMF_ITERS)
    return F, H.T.copy()


def _nndsvda(A, L):
    """Nonnegative double-SVD starting point, zeros filled with the data mean."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    W = np.zeros((A.shape[0], L))
    H = np.zeros((L, A.shape[1]))
    W[:, 0] = np.sqrt(s[0]) * np.abs(U[:, 0])
    H[0] = np.sqrt(s[0]) * np.abs(Vt[0])
    for j in range(1, L):
        u, v = U[:, j], Vt[j]
        up, un = np.maximum(u, 0.0), np.maximum(-u, 0.0)
        vp, vn = np.maximum(v, 0.0), np.maximum(-v, 0.0)
        nup, nun = np.linalg.norm(up), np.linalg.norm(un)
        nvp, nvn = np.linalg.norm(vp), np.linalg.norm(vn)
        mp, mn = nup * nvp, nun * nvn
        if mp >= mn and mp > 0:
            W[:, j] = np.sqrt(s[j] * mp) * up / nup
            H[j] = np.sqrt(s[j] * mp) * vp / nvp
        elif mn > 0:
            W[:, j] = np.sqrt(s[j] * mn) * un / nun
            H[j] = np.sqrt(s[j] * mn) * vn / nvn
    fill = max(A.mean(), _TINY)
    W[W == 0] = fill
    H[H == 0] = fill
    return W, H


def _nmf_kl(A, W, H, iters):
    """Lee-Seung multiplicative updates for the KL objective."""
    for _ in range(iters):
        R = A / np.maximum(W @ H, _TINY)
        H *= (W.T @ R) / np.maximum(W.sum(axis=0)[:, None], _TINY)
        R = A / np.maximum(W @ H, _TINY)
        W *= (R @ H.T) / np.maximum(H.sum(axis=1)[None, :], _TINY)
    return W, H


def _knn_weights(X, cfg):
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if N < 2:
        raise DegenerateDataError("autocorrelation needs at least 2 observations")
    k = min(cfg.k, N - 1)
    _, idx = cKDTree(X).query(X, k=k + 1)
    idx = np.atleast_2d(idx)[:, 1:]
    rows = np.repeat(np.arange(N), k)
    data = np.ones(N * k)
    A = scipy.sparse.csr_matrix((data, (rows, idx.ravel())), shape=(N, N))
    return A.maximum(A.T)


def morans_i(v, X, cfg=None):
    """Moran's I of v on the symmetrized binary kNN graph over X."""
    cfg = cfg or SpatialGraphConfig()
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != np.asarray(X).shape[0]:
        raise ShapeError("v and X must have the same number of rows")
    if np.ptp(v) == 0:
        raise DegenerateDataError("v has zero variance")
    W = _knn_weights(X, cfg)
    vc = v - v.mean()
    N = v.shape[0]
    return float(N / W.sum() * (vc @ (W @ vc)) / (vc @ vc))


def assign_spatial_components(F0, W0, X, T, cfg=None):
    """Reorder paired factor/loading columns by descending Moran's I.

    Constant columns get sentinel autocorrelation -inf so they land in
    the nonspatial tail; ties keep the original column order. T is
    validated but the split itself is the caller's, since the full
    permuted pair is returned.
    """
    cfg = cfg or SpatialGraphConfig()
    F0 = np.asarray(F0, dtype=np.float64)
    W0 = np.asarray(W0, dtype=np.float64)
    if F0.shape[1] != W0.shape[1]:
        raise ShapeError("F0 and W0 must have the same number of columns")
    L = F0.shape[1]
    if not 0 <= T <= L:
        raise ParameterError(f"T must lie in [0, {L}], got {T}")
    graph = _knn_weights(X, cfg)
    N = F0.shape[0]
    scores = np.empty(L)
    for l in range(L):
        vc = F0[:, l] - F0[:, l].mean()
        denom = float(vc @ vc)
        if denom == 0.0:
            scores[l] = -np.inf
        else:
            scores[l] = N / graph.sum() * (vc @ (graph @ vc)) / denom
    order = np.argsort(-scores, kind="stable")
    return F0[:, order], W0[:, order]
