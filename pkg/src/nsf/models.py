"""The factor-model family: FA, PNMF, RSF, NSF, and the NSFH hybrid.

One parametric family covers all five variants. The data mean for
observation i, feature j is

    nonnegative:  lambda_ij = sum_{l<=T} w_jl exp(f_il) + sum_{l>T} v_jl exp(h_il)
    real-valued:  mu_ij     = sum_{l<=T} w_jl f_il      + sum_{l>T} v_jl h_il

where the first T components carry sparse-GP spatial priors over f and the
remaining L-T components carry mean-field Gaussian posteriors over h. Count
families scale lambda by the size factor nu_i. The named variants are the
corners of (nonnegative, T): NSF (nonnegative, T=L), PNMF (nonnegative,
T=0), NSFH (nonnegative, 0<T<L), RSF (real, T=L), FA (real, T=0).
"""

from dataclasses import dataclass

import numpy as np

from . import initialization, objective, transforms
from .exceptions import ParameterError, ShapeError, UnsupportedModelError
from .kernels import KernelParams, chol_with_jitter, cross_cov
from .likelihoods import GAUSSIAN, POISSON, LikelihoodSpec
from .svgp import SpatialComponentState, choose_inducing_points, marginal_posterior

_DEFAULT_MAX_INDUCING = 500


@dataclass
class ModelSpec:
    """Structural description of one model in the family.

    T defaults to L // 2 (the hybrid default). Real-valued models require
    T = 0 (FA) or T = L (RSF) and a gaussian likelihood; nonnegative models
    require a count likelihood.
    """

    L: int
    T: int | None = None
    nonnegative: bool = True
    likelihood: LikelihoodSpec | str = POISSON
    kernel: str = "matern32"
    M: int | None = None
    S: int = 3

    def __post_init__(self):
        self.L = int(self.L)
        if self.L < 1:
            raise ParameterError(f"L must be >= 1, got {self.L}")
        self.T = self.L // 2 if self.T is None else int(self.T)
        if not 0 <= self.T <= self.L:
            raise ParameterError(f"T must lie in [0, {self.L}], got {self.T}")
        if isinstance(self.likelihood, str):
            self.likelihood = LikelihoodSpec(self.likelihood)
        self.kernel = KernelParams(self.kernel, 1.0, 1.0).kind
        self.S = int(self.S)
        if self.S < 1:
            raise ParameterError(f"S must be >= 1, got {self.S}")
        if self.M is not None:
            self.M = int(self.M)
            if self.M < 1:
                raise ParameterError(f"M must be >= 1, got {self.M}")
        if not self.nonnegative and 0 < self.T < self.L:
            raise UnsupportedModelError(
                "real-valued hybrids are not supported: T must be 0 or L when nonnegative=False"
            )
        gaussian = self.likelihood.family == GAUSSIAN
        if self.nonnegative and gaussian:
            raise UnsupportedModelError("nonnegative models need a count likelihood")
        if not self.nonnegative and not gaussian:
            raise UnsupportedModelError("real-valued models need the gaussian likelihood")

    @property
    def kind(self):
        if self.nonnegative:
            if self.T == self.L:
                return "nsf"
            return "pnmf" if self.T == 0 else "nsfh"
        return "rsf" if self.T == self.L else "fa"


@dataclass
class MeanFieldState:
    """Mean-field variational block for the nonspatial components.

    q(h_il) = N(delta_il, omega_il) with omega stored on the log scale;
    the prior per component is N(m_l, s_l^2), both treated as optimizable.
    """

    delta: np.ndarray
    log_omega: np.ndarray
    prior_mean: np.ndarray
    prior_log_var: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.log_omega = np.asarray(self.log_omega, dtype=np.float64)
        self.prior_mean = np.asarray(self.prior_mean, dtype=np.float64).ravel()
        self.prior_log_var = np.asarray(self.prior_log_var, dtype=np.float64).ravel()
        if self.delta.shape != self.log_omega.shape:
            raise ShapeError("delta and log_omega must share a shape")
        K = self.delta.shape[1]
        if self.prior_mean.shape != (K,) or self.prior_log_var.shape != (K,):
            raise ShapeError(f"prior parameter arrays must have shape ({K},)")

    @property
    def omega(self):
        return np.exp(self.log_omega)


def kl_meanfield(state, i, l):
    """Closed-form KL( q(h_il) || N(m_l, s_l^2) ) for one entry."""
    return float(
        transforms.kl_meanfield_matrix(
            state.delta[i : i + 1, l : l + 1],
            state.log_omega[i : i + 1, l : l + 1],
            state.prior_mean[l : l + 1],
            state.prior_log_var[l : l + 1],
        )[0, 0]
    )


@dataclass
class SpatialBlockState:
    """Stacked variational state of the T spatial components.

    Z is shared across components and frozen; omega_raw holds the
    unconstrained Cholesky parameterization (see transforms).
    """

    Z: np.ndarray
    delta: np.ndarray
    omega_raw: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray
    log_amp: np.ndarray
    log_len: np.ndarray
    kernel_kind: str

    def __post_init__(self):
        T, M = self.delta.shape
        if self.Z.shape[0] != M:
            raise ShapeError("delta width must match the inducing count")
        if self.omega_raw.shape != (T, M, M):
            raise ShapeError(f"omega_raw must be ({T}, {M}, {M})")

    @property
    def n_components(self):
        return self.delta.shape[0]

    def kernel_params(self, l):
        return KernelParams(
            self.kernel_kind,
            float(np.exp(self.log_amp[l])),
            float(np.exp(self.log_len[l])),
        )

    def omega_chol(self, l):
        return transforms.omega_chol_from_raw(self.omega_raw[l])

    def state(self, l):
        return SpatialComponentState(
            Z=self.Z,
            delta=self.delta[l],
            omega_chol=self.omega_chol(l),
            beta0=float(self.beta0[l]),
            beta1=self.beta1[l],
            kernel=self.kernel_params(l),
        )


class FactorModel:
    """A model instance bound to its training coordinates and size factors.

    W (J x T) and V (J x L-T) are the spatial and nonspatial loadings; the
    corresponding variational blocks live in `spatial` and `meanfield`.
    log_aux carries per-feature likelihood parameters on the log scale
    (dispersion for negative_binomial, variance for gaussian).
    """

    def __init__(self, spec, X, nu, W, V, spatial, meanfield, log_aux, feature_names=None):
        self.spec = spec
        self.X = np.asarray(X, dtype=np.float64)
        self.nu = np.asarray(nu, dtype=np.float64).ravel()
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.V = np.ascontiguousarray(V, dtype=np.float64)
        self.spatial = spatial
        self.meanfield = meanfield
        self.log_aux = None if log_aux is None else np.asarray(log_aux, dtype=np.float64)
        self.feature_names = list(feature_names) if feature_names is not None else None
        T, K = spec.T, spec.L - spec.T
        if self.W.shape[1] != T or self.V.shape[1] != K:
            raise ShapeError(
                f"loadings widths ({self.W.shape[1]}, {self.V.shape[1]}) do not match (T, L-T) = ({T}, {K})"
            )
        if self.W.shape[0] != self.V.shape[0]:
            raise ShapeError("W and V must have the same number of feature rows")
        if (spatial is None) != (T == 0):
            raise ShapeError("spatial block must be present exactly when T > 0")
        if (meanfield is None) != (K == 0):
            raise ShapeError("mean-field block must be present exactly when T < L")
        if self.X.shape[0] != self.nu.shape[0]:
            raise ShapeError("X and nu must have the same number of rows")
        if meanfield is not None and meanfield.delta.shape[0] != self.X.shape[0]:
            raise ShapeError("mean-field block must cover every training row")

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def J(self):
        return self.W.shape[0]

    @property
    def L(self):
        return self.spec.L

    @property
    def T(self):
        return self.spec.T

    def likelihood_spec(self):
        """Current LikelihoodSpec with aux read off the optimized log scale."""
        family = self.spec.likelihood.family
        if self.log_aux is None:
            return LikelihoodSpec(family)
        return LikelihoodSpec(family, aux=np.exp(self.log_aux))

    def parameters(self):
        """Live references to every optimizable array, in a stable order."""
        p = {}
        if self.T > 0:
            p["W"] = self.W
            p["sp.delta"] = self.spatial.delta
            p["sp.omega_raw"] = self.spatial.omega_raw
            p["sp.beta0"] = self.spatial.beta0
            p["sp.beta1"] = self.spatial.beta1
            p["sp.log_amp"] = self.spatial.log_amp
            p["sp.log_len"] = self.spatial.log_len
        if self.T < self.L:
            p["V"] = self.V
            p["mf.delta"] = self.meanfield.delta
            p["mf.log_omega"] = self.meanfield.log_omega
            p["mf.prior_mean"] = self.meanfield.prior_mean
            p["mf.prior_log_var"] = self.meanfield.prior_log_var
        if self.log_aux is not None:
            p["log_aux"] = self.log_aux
        return p

    def config_dict(self):
        """JSON-ready echo of the structural configuration."""
        return {
            "kind": self.spec.kind,
            "L": self.spec.L,
            "T": self.spec.T,
            "nonnegative": self.spec.nonnegative,
            "likelihood": self.spec.likelihood.family,
            "kernel": self.spec.kernel,
            "M": None if self.spatial is None else int(self.spatial.Z.shape[0]),
            "S": self.spec.S,
            "N": self.N,
            "J": self.J,
        }


def training_target(model, data):
    """Target matrix and size factors the model trains against.

    Gaussian models train on the dataset's normalized view with unit size
    factors; count models train on raw counts with the dataset's nu.
    """
    Y = np.asarray(data.Y, dtype=np.float64)
    if Y.shape[0] != model.N:
        raise ShapeError(f"dataset has {Y.shape[0]} rows, model was built on {model.N}")
    if not np.array_equal(np.asarray(data.X, dtype=np.float64), model.X):
        raise ShapeError("dataset coordinates differ from the model's training coordinates")
    if model.spec.likelihood.family == GAUSSIAN:
        return np.asarray(data.normalized(), dtype=np.float64), np.ones(model.N)
    return Y, np.asarray(data.nu, dtype=np.float64)


def build_model(spec, data, seed=0):
    """Allocate and initialize a FactorModel for a dataset.

    Factor/loading starting points come from the initialization module
    (NMF for nonnegative models on raw counts, SVD on the normalized matrix
    otherwise); for hybrids the columns are ordered by descending Moran's I
    before the first T become spatial. GP variational means are set by
    nearest-inducing-point averaging of the (log-transformed, for
    nonnegative models) initial factors.
    """
    Y = np.asarray(data.Y, dtype=np.float64)
    X = np.asarray(data.X, dtype=np.float64)
    N, J = Y.shape
    if X.shape[0] != N:
        raise ShapeError("counts and coordinates disagree on the number of rows")
    gaussian = spec.likelihood.family == GAUSSIAN
    target = np.asarray(data.normalized(), dtype=np.float64) if gaussian else Y
    nu = np.ones(N) if gaussian else np.asarray(data.nu, dtype=np.float64)
    L, T = spec.L, spec.T
    K = L - T
    M = spec.M if spec.M is not None else min(N, _DEFAULT_MAX_INDUCING)
    if M > N:
        raise ParameterError(f"M = {M} exceeds the number of observations {N}")

    # Pure-spatial nonnegative models are initialized like a hybrid with L
    # scratch nonspatial components: over-factorize, rank the columns by
    # spatial autocorrelation, keep the L most spatial, discard the rest.
    # A plain rank-L NMF tends to spend components on non-spatial structure
    # (background and feature-group effects), which the GP prior then cannot
    # pull apart.
    L_init = min(2 * L, N, J) if (spec.nonnegative and T == L) else L
    F0, W0 = initialization.init_factors(target, L_init, spec.nonnegative, seed)
    if 0 < T < L_init:
        F0, W0 = initialization.assign_spatial_components(F0, W0, X, T)
    F0, W0 = F0[:, :L], W0[:, :L]
    W = np.ascontiguousarray(W0[:, :T])
    V = np.ascontiguousarray(W0[:, T:])
    if spec.nonnegative:
        G = np.log(np.maximum(F0, initialization.LOG_FLOOR))
    else:
        G = F0.copy()

    spatial = None
    if T > 0:
        Z = choose_inducing_points(X, M, seed)
        span = float(np.mean(np.ptp(X, axis=0))) if N > 1 else 0.0
        ell0 = max(initialization.LENGTHSCALE_FRACTION * span, 1e-6)
        kp = KernelParams(spec.kernel, 1.0, ell0)
        Kuu = cross_cov(kp, Z, Z)
        Lc, _ = chol_with_jitter(Kuu, scale=1.0)
        C0 = np.sqrt(initialization.OMEGA_INIT_SCALE) * Lc
        raw0 = transforms.omega_raw_from_chol(C0)
        delta0 = _nearest_inducing_means(X, Z, G[:, :T])
        D = X.shape[1]
        spatial = SpatialBlockState(
            Z=Z,
            delta=np.ascontiguousarray(delta0.T),
            omega_raw=np.ascontiguousarray(np.broadcast_to(raw0, (T, M, M)).copy()),
            beta0=np.zeros(T),
            beta1=np.zeros((T, D)),
            log_amp=np.zeros(T),
            log_len=np.full(T, np.log(ell0)),
            kernel_kind=spec.kernel,
        )

    meanfield = None
    if K > 0:
        meanfield = MeanFieldState(
            delta=np.ascontiguousarray(G[:, T:]),
            log_omega=np.full((N, K), np.log(initialization.MF_OMEGA_INIT)),
            prior_mean=np.zeros(K),
            prior_log_var=np.zeros(K),
        )

    family = spec.likelihood.family
    if family == GAUSSIAN:
        log_aux = np.log(np.maximum(target.var(axis=0), 1e-8))
    elif family == POISSON:
        log_aux = None
    else:
        log_aux = np.zeros(J)

    names = getattr(data, "feature_names", None)
    return FactorModel(spec, X, nu, W, V, spatial, meanfield, log_aux, names)


def _nearest_inducing_means(X, Z, G):
    """Average each factor column over the points nearest each inducing point."""
    if Z.shape[0] == X.shape[0] and np.array_equal(Z, X):
        return G.copy()
    sq = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(Z * Z, axis=1)[None, :]
        - 2.0 * (X @ Z.T)
    )
    labels = np.argmin(sq, axis=1)
    M = Z.shape[0]
    counts = np.bincount(labels, minlength=M).astype(np.float64)
    sums = np.zeros((M, G.shape[1]))
    np.add.at(sums, labels, G)
    out = np.empty_like(sums)
    nonempty = counts > 0
    out[nonempty] = sums[nonempty] / counts[nonempty, None]
    if not nonempty.all():
        # an inducing point that attracted no data point borrows its nearest row
        nearest = np.argmin(sq, axis=0)
        for m in np.nonzero(~nonempty)[0]:
            out[m] = G[nearest[m]]
    return out


def factor_point_estimates(
    model, rows=None, coords=None, estimator="geometric", extrapolate_nonspatial=False
):
    """Point estimates of the spatial and nonspatial factor matrices.

    Exactly one of rows (training-row indices) or coords (query coordinates)
    must be given. Nonnegative models return exp-scale estimates: the
    posterior geometric mean exp(mu) by default, or the arithmetic
    lognormal mean exp(mu + var/2) with estimator="mean". Real-valued
    models return posterior means either way. Out-of-sample nonspatial
    factors fall back to the prior mean m_l; for a fully nonspatial model
    that extrapolation must be opted into, since coordinates then carry no
    information at all.
    """
    if (rows is None) == (coords is None):
        raise ParameterError("pass exactly one of rows or coords")
    if estimator not in ("geometric", "mean"):
        raise ParameterError(f"unknown estimator {estimator!r}")
    T, K = model.T, model.L - model.T
    if coords is not None:
        if T == 0 and not extrapolate_nonspatial:
            raise UnsupportedModelError(
                "no spatial interpolation exists for a nonspatial model"
            )
        Xq = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    else:
        rows = np.asarray(rows, dtype=np.intp)
        Xq = model.X[rows]
    n = Xq.shape[0]

    SF = np.zeros((n, T))
    for l in range(T):
        post = marginal_posterior(model.spatial.state(l), Xq)
        if not model.spec.nonnegative:
            SF[:, l] = post.mean
        elif estimator == "geometric":
            SF[:, l] = np.exp(post.mean)
        else:
            SF[:, l] = np.exp(post.mean + 0.5 * post.variance)

    NF = np.zeros((n, K))
    if K > 0:
        mf = model.meanfield
        if coords is None:
            mu = mf.delta[rows]
            var = np.exp(mf.log_omega[rows])
        else:
            mu = np.broadcast_to(mf.prior_mean, (n, K))
            var = np.broadcast_to(np.exp(mf.prior_log_var), (n, K))
        if not model.spec.nonnegative:
            NF[:] = mu
        elif estimator == "geometric":
            NF[:] = np.exp(mu)
        else:
            NF[:] = np.exp(mu + 0.5 * var)
    return SF, NF


def predict_mean(
    model,
    rows=None,
    coords=None,
    size_factors=None,
    estimator="geometric",
    extrapolate_nonspatial=False,
):
    """Predicted mean matrix at training rows or arbitrary coordinates.

    Nonnegative models return nu_i * lambda_ij, taking nu from the stored
    training size factors for rows and from size_factors (default 1) for
    coords. Real-valued models combine factors linearly without scaling.
    """
    SF, NF = factor_point_estimates(
        model,
        rows=rows,
        coords=coords,
        estimator=estimator,
        extrapolate_nonspatial=extrapolate_nonspatial,
    )
    lam = SF @ model.W.T + NF @ model.V.T
    if not model.spec.nonnegative:
        return lam
    n = lam.shape[0]
    if rows is not None:
        nu = model.nu[np.asarray(rows, dtype=np.intp)]
    elif size_factors is not None:
        nu = np.asarray(size_factors, dtype=np.float64).ravel()
        if nu.shape[0] != n:
            raise ShapeError(f"size_factors must have length {n}")
    else:
        nu = np.ones(n)
    return nu[:, None] * lam


def elbo(model, data, batch=None, S=None, seed=0):
    """Monte Carlo ELBO estimate (see the objective module for the formula)."""
    Yt, nu = training_target(model, data)
    if batch is not None and len(np.atleast_1d(batch)) == 0:
        raise ParameterError("batch must be nonempty")
    S = model.spec.S if S is None else int(S)
    if S < 1:
        raise ParameterError(f"S must be >= 1, got {S}")
    rng = np.random.default_rng(seed)
    value, _ = objective.elbo_and_grad(
        model, Yt, nu, batch, S, rng, want_grad=False
    )
    return value
