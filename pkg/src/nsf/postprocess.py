"""Interpretation helpers: simplex normalization and spatial importance.

A fitted nonnegative factorization Lambda = F W' is only identified up to
per-component rescaling. Normalizing onto simplices removes that freedom:
SPDE style makes every factor column sum to one and every loadings row sum
to one (the leftover per-feature scale restores Lambda); LDA style swaps
the roles. Spatial importance scores are simplex masses over the spatial
block: gamma_j for features, rho_i for observations.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateComponentError, ParameterError, ShapeError


@dataclass
class ProcessedFactorization:
    """Simplex-normalized factors/loadings plus the scale restoring Lambda.

    scale has length J for SPDE style and length N for LDA style. kept
    lists the surviving original component indices after degenerate
    (all-zero) components were dropped.
    """

    F_hat: np.ndarray
    W_hat: np.ndarray
    scale: np.ndarray
    style: str
    kept: np.ndarray


def _core(A, B):
    """Column-normalize A, push the mass into B, row-normalize B."""
    a = A.sum(axis=0)
    keep = a > 0
    if not keep.any():
        raise DegenerateComponentError("every component is identically zero")
    if not keep.all():
        warnings.warn(
            f"dropping {int((~keep).sum())} all-zero component(s)", stacklevel=3
        )
    kept = np.nonzero(keep)[0]
    A_hat = A[:, kept] / a[kept]
    B2 = B[:, kept] * a[kept]
    b = B2.sum(axis=1)
    zero_rows = b == 0
    if zero_rows.any():
        warnings.warn(
            f"{int(zero_rows.sum())} row(s) have zero total loading; their scale is 0",
            stacklevel=3,
        )
    B_hat = B2 / np.where(zero_rows, 1.0, b)[:, None]
    return A_hat, B_hat, b, kept


def simplex_normalize(F, W, style="spde"):
    """Project a nonnegative factorization onto per-style simplices."""
    F = np.asarray(F, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if F.ndim != 2 or W.ndim != 2 or F.shape[1] != W.shape[1]:
        raise ShapeError("F and W must be 2-d with matching component counts")
    if F.min() < 0 or W.min() < 0:
        raise ParameterError("simplex normalization requires nonnegative inputs")
    if style == "spde":
        F_hat, W_hat, scale, kept = _core(F, W)
    elif style == "lda":
        W_hat, F_hat, scale, kept = _core(W, F)
    else:
        raise ParameterError(f"unknown style {style!r}")
    return ProcessedFactorization(F_hat, W_hat, scale, style, kept)


def reconstruct(pf):
    """Mean matrix implied by a ProcessedFactorization."""
    R = pf.F_hat @ pf.W_hat.T
    if pf.style == "spde":
        return R * pf.scale[None, :]
    return R * pf.scale[:, None]


def _spatial_mass(W, V, F, H, style, axis_matrix):
    for name, arr in (("W", W), ("V", V), ("F", F), ("H", H)):
        if np.asarray(arr).ndim != 2:
            raise ShapeError(f"{name} must be 2-d")
    T = np.asarray(W).shape[1]
    A = np.hstack([np.asarray(F, dtype=np.float64), np.asarray(H, dtype=np.float64)])
    B = np.hstack([np.asarray(W, dtype=np.float64), np.asarray(V, dtype=np.float64)])
    pf = simplex_normalize(A, B, style)
    cols = np.nonzero(pf.kept < T)[0]
    mat = pf.W_hat if axis_matrix == "loadings" else pf.F_hat
    return np.clip(mat[:, cols].sum(axis=1), 0.0, 1.0)


def feature_spatial_scores(W, V, F, H):
    """Per-feature spatial mass gamma_j in [0, 1].

    Inputs are nonnegative point estimates: spatial/nonspatial loadings
    and the matching exponentiated factor posteriors. Features with zero
    total loading score 0 (with a warning from the normalization pass).
    """
    return _spatial_mass(W, V, F, H, "spde", "loadings")


def observation_spatial_scores(W, V, F, H):
    """Per-observation spatial mass rho_i in [0, 1]."""
    return _spatial_mass(W, V, F, H, "lda", "factors")


def top_features(W_hat, l, k):
    """Indices of the k largest entries of loadings column l, descending.

    Ties break toward the smaller index. Indices are 0-based.
    """
    W_hat = np.asarray(W_hat)
    J = W_hat.shape[0]
    if not 1 <= k <= J:
        raise ParameterError(f"k must lie in [1, {J}], got {k}")
    col = W_hat[:, l]
    order = np.lexsort((np.arange(J), -col))
    return order[:k]
