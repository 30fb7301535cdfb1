import numpy as np
import pytest

from conftest import hand_model, small_dataset
from nsf import (
    FitConfig,
    ModelSpec,
    build_model,
    check_gradients,
    dataset_from_arrays,
    elbo,
    fit,
    project_nonnegative,
)
from nsf.exceptions import DivergedFitError, ParameterError
from nsf.optimizer import adam_step, central_difference


def test_fit_config_validation():
    with pytest.raises(ParameterError):
        FitConfig(learning_rate=0.0)
    with pytest.raises(ParameterError):
        FitConfig(rel_tol=1.5)
    with pytest.raises(ParameterError):
        FitConfig(rel_tol=0.0)
    with pytest.raises(ParameterError):
        FitConfig(max_steps=-1)


def test_project_nonnegative():
    A = np.array([[-1.0, 2.0], [0.5, -0.1]])
    out = project_nonnegative(A.copy())
    np.testing.assert_array_equal(out, [[0.0, 2.0], [0.5, 0.0]])
    np.testing.assert_array_equal(project_nonnegative(out.copy()), out)
    B = np.array([[0.3, 1.0]])
    np.testing.assert_array_equal(project_nonnegative(B.copy()), B)


def _fresh_moments(params):
    return {
        k: (np.zeros_like(np.asarray(v, dtype=float)), np.zeros_like(np.asarray(v, dtype=float)))
        for k, v in params.items()
    }


def test_adam_zero_gradient_no_move():
    params = {"a": np.array([1.0, -2.0])}
    grads = {"a": np.zeros(2)}
    moments = _fresh_moments(params)
    adam_step(params, grads, moments, t=1, config=FitConfig())
    np.testing.assert_array_equal(params["a"], [1.0, -2.0])


def test_adam_first_step_magnitude():
    # with fresh moments the bias-corrected step is lr * g / (|g| + eps)
    lr = 0.01
    g = np.array([3.0, -0.5, 1e-3])
    params = {"a": np.zeros(3)}
    moments = _fresh_moments(params)
    adam_step(params, {"a": g.copy()}, moments, t=1, config=FitConfig(learning_rate=lr))
    np.testing.assert_allclose(params["a"], lr * np.sign(g), rtol=1e-4)


def test_adam_second_step_recursion():
    cfg = FitConfig(learning_rate=0.05)
    g = np.array([0.7])
    params = {"a": np.zeros(1)}
    moments = _fresh_moments(params)
    adam_step(params, {"a": g.copy()}, moments, 1, cfg)
    adam_step(params, {"a": g.copy()}, moments, 2, cfg)

    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
    m = (1 - b1) * g * (1 + b1)
    v = (1 - b2) * g**2 * (1 + b2)
    step1 = cfg.learning_rate * ((1 - b1) * g / (1 - b1)) / (
        np.sqrt((1 - b2) * g**2 / (1 - b2)) + eps
    )
    step2 = cfg.learning_rate * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
    np.testing.assert_allclose(params["a"], step1 + step2, rtol=1e-12)


def test_adam_rejects_nonfinite_gradient():
    params = {"a": np.zeros(2)}
    with pytest.raises(DivergedFitError):
        adam_step(params, {"a": np.array([1.0, np.nan])}, _fresh_moments(params), 1, FitConfig())


def test_fit_constant_data_recovers_rate():
    # every count is 7: the Poisson MLE for a one-component model is rate 7
    Y = np.full((30, 4), 7, dtype=np.int64)
    X = np.random.default_rng(0).uniform(-1, 1, size=(30, 2))
    data = dataset_from_arrays(Y, X)
    m = build_model(ModelSpec(L=1, T=0), data, seed=0)
    m, trace = fit(m, data, FitConfig(max_steps=500, seed=0))
    from nsf import predict_mean

    lam = predict_mean(m, rows=np.arange(30))
    assert abs(lam.mean() - 7.0) < 0.35
    assert trace.converged


def test_fit_deterministic():
    data = small_dataset(N=16, J=4, seed=3)
    cfg = FitConfig(max_steps=12, seed=9, rel_tol=1e-12)
    a = build_model(ModelSpec(L=2, T=1, M=8), data, seed=1)
    b = build_model(ModelSpec(L=2, T=1, M=8), data, seed=1)
    a, ta = fit(a, data, cfg)
    b, tb = fit(b, data, cfg)
    assert ta.elbo == tb.elbo
    assert ta.steps == tb.steps
    for k, arr in a.parameters().items():
        np.testing.assert_array_equal(arr, b.parameters()[k])


def test_fit_improves_elbo():
    data = small_dataset(N=20, J=5, seed=5)
    m = build_model(ModelSpec(L=2, T=1, M=10), data, seed=0)
    before = elbo(m, data, seed=0)
    m, trace = fit(m, data, FitConfig(max_steps=60, seed=0, rel_tol=1e-12))
    assert np.mean(trace.elbo[-10:]) > before


def test_fit_keeps_loadings_nonnegative():
    data = small_dataset(N=14, J=4, seed=7)
    m = build_model(ModelSpec(L=2, T=1, M=7), data, seed=0)
    for _ in range(5):
        m, _ = fit(m, data, FitConfig(max_steps=3, seed=0, rel_tol=1e-12))
        assert m.W.min() >= 0.0 and m.V.min() >= 0.0


def test_fit_trainable_filter_freezes_others():
    data = small_dataset(N=14, J=4, seed=9)
    m = build_model(ModelSpec(L=2, T=2, M=7), data, seed=0)
    frozen_len = m.spatial.log_len.copy()
    frozen_amp = m.spatial.log_amp.copy()
    w_before = m.W.copy()
    m, _ = fit(m, data, FitConfig(max_steps=10, seed=0, rel_tol=1e-12,
                                  trainable=["W", "sp.delta"]))
    np.testing.assert_array_equal(m.spatial.log_len, frozen_len)
    np.testing.assert_array_equal(m.spatial.log_amp, frozen_amp)
    assert not np.array_equal(m.W, w_before)
    with pytest.raises(ParameterError):
        fit(m, data, FitConfig(trainable=["nothing_matches"]))


def test_fit_minibatch_path_runs():
    data = small_dataset(N=20, J=4, seed=11)
    m = build_model(ModelSpec(L=2, T=1, M=8), data, seed=0)
    m, trace = fit(m, data, FitConfig(max_steps=8, batch_size=5, seed=0, rel_tol=1e-12))
    assert trace.steps == 8
    assert np.all(np.isfinite(trace.elbo))


def test_central_difference_exact_for_cubic():
    # the 5-point stencil integrates polynomials up to degree 4 exactly
    got = central_difference(lambda x: x**3, 1.0, 1e-2)
    assert got == pytest.approx(3.0, abs=1e-10)
    got = central_difference(np.exp, 0.0, 1e-3)
    assert got == pytest.approx(1.0, rel=1e-10)


def test_check_gradients_small_families():
    data = small_dataset(N=12, J=4, seed=13)
    for spec in (
        ModelSpec(L=2, T=1, M=5),
        ModelSpec(L=2, T=0),
        ModelSpec(L=2, T=2, M=5, nonnegative=False, likelihood="gaussian"),
    ):
        m = build_model(spec, data, seed=0)
        if spec.nonnegative:
            # keep loadings away from the projection boundary, where the
            # mean floor kinks the objective inside the FD stencil
            m.W += 0.05
            m.V += 0.05
        worst, per_param = check_gradients(m, data, eps=1e-4, seed=0)
        assert worst < 1e-4, (spec.kind, per_param)


def test_check_gradients_detects_corruption(monkeypatch):
    import nsf.optimizer as opt

    data = small_dataset(N=10, J=3, seed=17)
    m = build_model(ModelSpec(L=1, T=1, M=4), data, seed=0)
    m.W += 0.05

    real = opt.objective.elbo_and_grad

    def corrupted(*args, **kwargs):
        out = real(*args, **kwargs)
        if kwargs.get("want_grad", True) and isinstance(out, tuple):
            value, grads = out
            grads["sp.delta"] = grads["sp.delta"] * 2.0
            return value, grads
        return out

    monkeypatch.setattr(opt.objective, "elbo_and_grad", corrupted)
    worst, _ = check_gradients(m, data, eps=1e-4, seed=0)
    assert worst > 0.4
