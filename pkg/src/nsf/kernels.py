"""Stationary spatial covariance kernels and jittered Cholesky factorization.

Two kernel families are implemented, each parameterized by an amplitude a
and a single lengthscale ell shared across input dimensions:

    matern32:             k(r) = a^2 (1 + sqrt(3) r / ell) exp(-sqrt(3) r / ell)
    squared_exponential:  k(r) = a^2 exp(-r^2 / (2 ell^2))

with r the Euclidean distance between inputs. Gram-matrix assembly is a
hot path and exists in numba and numpy variants (see backend); both return
the covariance matrix together with its derivative with respect to
log(ell), which the optimizer consumes.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .exceptions import ParameterError, ShapeError, SingularMatrixError

MATERN32 = "matern32"
SQUARED_EXPONENTIAL = "squared_exponential"

_KIND_ALIASES = {
    "matern32": MATERN32,
    "sqexp": SQUARED_EXPONENTIAL,
    "squared_exponential": SQUARED_EXPONENTIAL,
}

_SQRT3 = math.sqrt(3.0)

# Jitter schedule for near-singular Gram matrices: 0, then scale * 1e-6
# escalating tenfold up to scale * 1e-2.
_JITTER_START = 1e-6
_JITTER_LEVELS = 5


@dataclass(frozen=True)
class KernelParams:
    """Stationary kernel parameters.

    Parameters
    ----------
    kind : str
        "matern32" or "squared_exponential" (alias "sqexp").
    amplitude : float
        Output scale a > 0; the kernel at zero distance equals a**2.
    lengthscale : float
        Correlation length ell > 0 in coordinate units.
    """

    kind: str
    amplitude: float
    lengthscale: float

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind)
        if kind is None:
            raise ParameterError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        for name in ("amplitude", "lengthscale"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0.0:
                raise ParameterError(f"{name} must be finite and > 0, got {value!r}")
            object.__setattr__(self, name, value)


def _pairwise_dist_loops(A, B):
    n, d = A.shape
    m = B.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = A[i, k] - B[j, k]
                acc += diff * diff
            out[i, j] = math.sqrt(acc)
    return out


def _pairwise_dist_numpy(A, B):
    # |a-b|^2 = |a|^2 + |b|^2 - 2 a.b; round-off can push tiny values < 0
    sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :]
    sq -= 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


_pairwise_dist_impl = backend.dispatch(_pairwise_dist_loops, _pairwise_dist_numpy)


def pairwise_dist(A, B):
    """Euclidean distance matrix between the rows of A (n x D) and B (m x D).

    When A and B are the same array object the diagonal is forced to
    exactly zero, so Gram diagonals equal amplitude**2 without round-off.
    """
    same = A is B
    Ac = np.ascontiguousarray(A, dtype=np.float64)
    Bc = Ac if same else np.ascontiguousarray(B, dtype=np.float64)
    if Ac.ndim != 2 or Bc.ndim != 2:
        raise ShapeError("coordinate arrays must be 2-dimensional")
    if Ac.shape[1] != Bc.shape[1]:
        raise ShapeError(
            f"coordinate dimension mismatch: {Ac.shape[1]} vs {Bc.shape[1]}"
        )
    r = _pairwise_dist_impl(Ac, Bc)
    if same:
        np.fill_diagonal(r, 0.0)
    return r


def _matern32_terms_loops(r, amp2, ell):
    n, m = r.shape
    K = np.empty((n, m))
    dK = np.empty((n, m))
    c = _SQRT3 / ell
    for i in range(n):
        for j in range(m):
            u = c * r[i, j]
            e = math.exp(-u)
            K[i, j] = amp2 * (1.0 + u) * e
            dK[i, j] = amp2 * u * u * e
    return K, dK


def _matern32_terms_numpy(r, amp2, ell):
    u = (_SQRT3 / ell) * r
    e = np.exp(-u)
    K = amp2 * (1.0 + u) * e
    dK = amp2 * u * u * e
    return K, dK


def _sqexp_terms_loops(r, amp2, ell):
    n, m = r.shape
    K = np.empty((n, m))
    dK = np.empty((n, m))
    inv2 = 1.0 / (ell * ell)
    for i in range(n):
        for j in range(m):
            q = r[i, j] * r[i, j] * inv2
            k = amp2 * math.exp(-0.5 * q)
            K[i, j] = k
            dK[i, j] = k * q
    return K, dK


def _sqexp_terms_numpy(r, amp2, ell):
    q = (r / ell) ** 2
    K = amp2 * np.exp(-0.5 * q)
    dK = K * q
    return K, dK


matern32_terms = backend.dispatch(_matern32_terms_loops, _matern32_terms_numpy)
sqexp_terms = backend.dispatch(_sqexp_terms_loops, _sqexp_terms_numpy)


def kernel_terms(params, r):
    """Covariance matrix and its d/dlog(ell) over a distance matrix r."""
    r = np.ascontiguousarray(r, dtype=np.float64)
    if params.kind == MATERN32:
        return matern32_terms(r, params.amplitude**2, params.lengthscale)
    return sqexp_terms(r, params.amplitude**2, params.lengthscale)


def kernel_value(params, r):
    """Evaluate k(r) for scalar or array distances r >= 0."""
    r = np.asarray(r, dtype=np.float64)
    a2 = params.amplitude**2
    if params.kind == MATERN32:
        u = (_SQRT3 / params.lengthscale) * r
        return a2 * (1.0 + u) * np.exp(-u)
    return a2 * np.exp(-0.5 * (r / params.lengthscale) ** 2)


def kernel_eval(params, x1, x2):
    """Kernel value between two coordinate vectors."""
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    x2 = np.asarray(x2, dtype=np.float64).ravel()
    if x1.shape != x2.shape:
        raise ShapeError(f"input dimension mismatch: {x1.shape} vs {x2.shape}")
    r = float(np.linalg.norm(x1 - x2))
    return float(kernel_value(params, r))


def cross_cov(params, A, B):
    """Covariance matrix between row coordinates of A (n x D) and B (m x D)."""
    return kernel_terms(params, pairwise_dist(A, B))[0]


def chol_with_jitter(K, scale=None):
    """Lower Cholesky factor of K + j*I for the smallest workable jitter j.

    Tries j = 0 first, then scale * 1e-6 escalating tenfold up to
    scale * 1e-2. scale defaults to the mean absolute diagonal of K; for
    kernel Gram matrices pass amplitude**2 so the jitter tracks the output
    scale.

    Returns
    -------
    (L, j) : lower-triangular ndarray and the jitter that succeeded.

    Raises
    ------
    SingularMatrixError
        If factorization fails at every level.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {K.shape}")
    if scale is None:
        scale = float(np.mean(np.abs(np.diag(K)))) if K.shape[0] else 0.0
    jitters = [0.0] + [scale * _JITTER_START * 10.0**k for k in range(_JITTER_LEVELS)]
    for j in jitters:
        try:
            if j == 0.0:
                return np.linalg.cholesky(K), 0.0
            return np.linalg.cholesky(K + j * np.eye(K.shape[0])), j
        except np.linalg.LinAlgError:
            continue
    raise SingularMatrixError(
        f"Cholesky factorization failed at maximum jitter {jitters[-1]:g}"
    )
