"""Shared fixtures and small model builders for the test suite."""

import numpy as np
import pytest

from nsf import (
    FactorModel,
    MeanFieldState,
    SpatialBlockState,
    dataset_from_arrays,
)
from nsf.kernels import cross_cov, chol_with_jitter
from nsf.transforms import omega_raw_from_chol

# Lines appended by the acceptance tests; printed as a block at the end of
# the run so each criterion's verdict is visible in one place.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_counts(N, J, seed=0, rate=5.0):
    rng = np.random.default_rng(seed)
    Y = rng.poisson(rate, size=(N, J)).astype(np.int64)
    # guard against zero rows so size factors stay defined
    Y[Y.sum(axis=1) == 0, 0] = 1
    return Y


def grid_coords(side):
    idx = np.arange(side * side)
    return np.column_stack([idx % side, idx // side]).astype(np.float64)


def small_dataset(N=24, J=6, seed=0, rate=5.0):
    rng = np.random.default_rng(seed + 1000)
    X = rng.uniform(-1.0, 1.0, size=(N, 2))
    return dataset_from_arrays(random_counts(N, J, seed, rate), X)


def hand_model(spec, X, nu=None, seed=0, feature_names=None, J=None):
    """A FactorModel with small random parameters, bypassing build_model.

    Keeps loadings strictly positive and variational scales moderate so
    likelihood and KL terms stay well conditioned in tests.
    """
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    J = 5 if J is None else J
    nu = np.ones(N) if nu is None else np.asarray(nu, dtype=np.float64)
    T, K = spec.T, spec.L - spec.T
    M = spec.M if spec.M is not None else min(N, 10)

    W = rng.uniform(0.5, 2.0, size=(J, T))
    V = rng.uniform(0.5, 2.0, size=(J, K))
    if not spec.nonnegative:
        W = W - 1.0
        V = V - 1.0

    spatial = None
    if T > 0:
        Z = X[rng.choice(N, size=M, replace=False)].copy()
        omega_raw = np.empty((T, M, M))
        for l in range(T):
            Kuu = cross_cov(_kp(spec, 1.0, 0.7), Z, Z)
            C = 0.3 * chol_with_jitter(Kuu, scale=1.0)[0]
            omega_raw[l] = omega_raw_from_chol(C)
        spatial = SpatialBlockState(
            Z=Z,
            delta=0.3 * rng.standard_normal((T, M)),
            omega_raw=omega_raw,
            beta0=0.1 * rng.standard_normal(T),
            beta1=0.1 * rng.standard_normal((T, X.shape[1])),
            log_amp=np.zeros(T),
            log_len=np.full(T, np.log(0.7)),
            kernel_kind=spec.kernel,
        )

    meanfield = None
    if K > 0:
        meanfield = MeanFieldState(
            delta=0.3 * rng.standard_normal((N, K)),
            log_omega=np.full((N, K), np.log(0.05)),
            prior_mean=np.zeros(K),
            prior_log_var=np.zeros(K),
        )

    family = spec.likelihood.family
    if family == "poisson":
        log_aux = None
    elif family == "negative_binomial":
        log_aux = np.full(J, np.log(10.0))
    else:
        log_aux = np.full(J, np.log(0.5))

    return FactorModel(
        spec=spec,
        X=X,
        nu=nu,
        W=W,
        V=V,
        spatial=spatial,
        meanfield=meanfield,
        log_aux=log_aux,
        feature_names=feature_names,
    )


def _kp(spec, amp, ell):
    from nsf.kernels import KernelParams

    return KernelParams(spec.kernel, amp, ell)


def copy_parameters(src, dst):
    """Copy every optimizable array from one model into another in place."""
    sp, dp = src.parameters(), dst.parameters()
    assert set(sp) == set(dp)
    for k, arr in sp.items():
        dp[k][...] = arr


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
