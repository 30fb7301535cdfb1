import numpy as np
import pytest

from nsf.exceptions import DegenerateComponentError, ParameterError
from nsf.postprocess import (
    feature_spatial_scores,
    observation_spatial_scores,
    reconstruct,
    simplex_normalize,
    top_features,
)


def random_factorization(rng, N=9, J=6, L=4):
    return rng.uniform(0.1, 3.0, size=(N, L)), rng.uniform(0.1, 3.0, size=(J, L))


def test_spde_sums(rng):
    F, W = random_factorization(rng, N=5, J=4, L=3)
    pf = simplex_normalize(F, W, "spde")
    np.testing.assert_allclose(pf.F_hat.sum(axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(pf.W_hat.sum(axis=1), 1.0, rtol=1e-12)
    assert pf.scale.shape == (4,)
    assert np.all(pf.scale > 0)


def test_lda_sums(rng):
    F, W = random_factorization(rng, N=5, J=4, L=3)
    pf = simplex_normalize(F, W, "lda")
    np.testing.assert_allclose(pf.W_hat.sum(axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(pf.F_hat.sum(axis=1), 1.0, rtol=1e-12)
    assert pf.scale.shape == (5,)


def test_reconstruction_invariance(rng):
    for style in ("spde", "lda"):
        F, W = random_factorization(rng)
        pf = simplex_normalize(F, W, style)
        np.testing.assert_allclose(reconstruct(pf), F @ W.T, rtol=1e-10)


def test_identity_fixed_point():
    eye = np.eye(3)
    pf = simplex_normalize(eye, eye, "spde")
    np.testing.assert_array_equal(pf.F_hat, eye)
    np.testing.assert_array_equal(pf.W_hat, eye)
    np.testing.assert_array_equal(pf.scale, np.ones(3))


def test_zero_component_dropped_with_warning(rng):
    F, W = random_factorization(rng, L=3)
    F[:, 1] = 0.0
    with pytest.warns(UserWarning, match="all-zero"):
        pf = simplex_normalize(F, W, "spde")
    assert pf.F_hat.shape[1] == 2
    np.testing.assert_array_equal(pf.kept, [0, 2])
    np.testing.assert_allclose(reconstruct(pf), F @ W.T, rtol=1e-10)


def test_all_zero_errors():
    with pytest.raises(DegenerateComponentError):
        simplex_normalize(np.zeros((4, 2)), np.ones((3, 2)), "spde")


def test_input_validation(rng):
    F, W = random_factorization(rng)
    with pytest.raises(ParameterError):
        simplex_normalize(F, W, "other")
    with pytest.raises(ParameterError):
        simplex_normalize(-F, W, "spde")


def test_gamma_extremes(rng):
    F = rng.uniform(0.1, 1.0, size=(6, 3))
    W = rng.uniform(0.1, 1.0, size=(4, 3))
    empty_f = np.zeros((6, 0))
    empty_w = np.zeros((4, 0))
    np.testing.assert_allclose(feature_spatial_scores(W, empty_w, F, empty_f), 1.0)
    np.testing.assert_allclose(feature_spatial_scores(empty_w, W, empty_f, F), 0.0)
    np.testing.assert_allclose(observation_spatial_scores(W, empty_w, F, empty_f), 1.0)
    np.testing.assert_allclose(observation_spatial_scores(empty_w, W, empty_f, F), 0.0)


def test_gamma_hand_value():
    # one feature, normalized loadings row must become (0.25, 0.75)
    F = np.array([[1.0, 1.0]])
    W = np.array([[0.25, 0.75]])
    gamma = feature_spatial_scores(W[:, :1], W[:, 1:], F[:, :1], F[:, 1:])
    assert gamma[0] == pytest.approx(0.25, rel=1e-12)


def test_rho_hand_value():
    F = np.array([[0.6, 0.4]])
    W = np.array([[1.0, 1.0], [1.0, 1.0]])
    rho = observation_spatial_scores(W[:, :1], W[:, 1:], F[:, :1], F[:, 1:])
    assert rho[0] == pytest.approx(0.6, rel=1e-12)


def test_scores_bounded(rng):
    for _ in range(20):
        N, J, T, K = 7, 5, 2, 2
        F = rng.uniform(0.05, 2.0, size=(N, T))
        H = rng.uniform(0.05, 2.0, size=(N, K))
        W = rng.uniform(0.05, 2.0, size=(J, T))
        V = rng.uniform(0.05, 2.0, size=(J, K))
        gamma = feature_spatial_scores(W, V, F, H)
        rho = observation_spatial_scores(W, V, F, H)
        assert np.all((gamma >= 0) & (gamma <= 1))
        assert np.all((rho >= 0) & (rho <= 1))


def test_scores_invariant_to_component_rescaling(rng):
    N, J, T, K = 6, 5, 2, 1
    F = rng.uniform(0.05, 2.0, size=(N, T))
    H = rng.uniform(0.05, 2.0, size=(N, K))
    W = rng.uniform(0.05, 2.0, size=(J, T))
    V = rng.uniform(0.05, 2.0, size=(J, K))
    base = feature_spatial_scores(W, V, F, H)
    c = 7.3
    F2, W2 = F.copy(), W.copy()
    F2[:, 1] *= c
    W2[:, 1] /= c
    np.testing.assert_allclose(feature_spatial_scores(W2, V, F2, H), base, rtol=1e-10)


def test_top_features_ordering():
    W_hat = np.array([[0.1, 0.0], [0.9, 0.0], [0.5, 0.0]])
    np.testing.assert_array_equal(top_features(W_hat, 0, 2), [1, 2])
    np.testing.assert_array_equal(top_features(W_hat, 0, 3), [1, 2, 0])


def test_top_features_ties_break_by_index():
    W_hat = np.array([[0.5, 0.0], [0.5, 0.0], [0.2, 0.0]])
    np.testing.assert_array_equal(top_features(W_hat, 0, 2), [0, 1])


def test_top_features_validation():
    W_hat = np.ones((3, 2))
    with pytest.raises(ParameterError):
        top_features(W_hat, 0, 0)
    with pytest.raises(ParameterError):
        top_features(W_hat, 0, 4)
