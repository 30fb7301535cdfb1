"""Adam-based ELBO maximization with projected nonnegativity.

The loop draws an independent minibatch and Monte Carlo seed every step
from one SeedSequence tree, takes an Adam ascent step on every trainable
array, and clips the loadings of nonnegative models back to the feasible
set. Convergence is declared when two consecutive 10-step averages of the
objective agree to rel_tol in relative terms.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import objective
from .exceptions import DivergedFitError, ParameterError
from .models import training_target


@dataclass
class FitConfig:
    """Optimization settings.

    batch_size 0 means full-batch. S None defers to the model spec.
    trainable, when given, is a list of parameter-name prefixes; arrays
    whose name matches no prefix are frozen at their current values.
    """

    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 500
    rel_tol: float = 1e-4
    S: int | None = None
    batch_size: int = 0
    seed: int = 0
    trainable: list | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if not 0 < self.rel_tol < 1:
            raise ParameterError("rel_tol must lie in (0, 1)")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ParameterError("beta1 and beta2 must lie in [0, 1)")
        if self.max_steps < 0:
            raise ParameterError("max_steps must be >= 0")
        if self.batch_size < 0:
            raise ParameterError("batch_size must be >= 0")
        if self.S is not None and self.S < 1:
            raise ParameterError("S must be >= 1")


@dataclass
class FitTrace:
    """Objective history and bookkeeping from one fit call."""

    elbo: list = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False
    steps: int = 0


def project_nonnegative(A, out=None):
    """Entrywise projection onto the nonnegative orthant."""
    return np.maximum(A, 0.0, out=out)


def adam_step(params, grads, moments, t, config):
    """One in-place Adam ascent step over a dict of parameter arrays.

    moments maps each name to its (m, v) accumulator pair; t is the
    1-based step index used for bias correction.
    """
    if t < 1:
        raise ParameterError("t must be >= 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, arr in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergedFitError(f"non-finite gradient for {name} at step {t}")
        m, v = moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        arr += config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)


def _trainable_names(params, trainable):
    if trainable is None:
        return list(params)
    prefixes = tuple(trainable)
    names = [k for k in params if k.startswith(prefixes)]
    if not names:
        raise ParameterError(f"no parameters match trainable prefixes {list(prefixes)}")
    return names


def fit(model, data, config=None):
    """Maximize the ELBO in place; returns (model, FitTrace).

    Batch membership and Monte Carlo draws are both derived from
    config.seed, so a repeated call on a fresh model is bit-reproducible.
    """
    if config is None:
        config = FitConfig()
    Yt, nu = training_target(model, data)
    cache = objective.ObjectiveCache(model, Yt)
    params = model.parameters()
    names = _trainable_names(params, config.trainable)
    trained = {k: params[k] for k in names}
    moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in trained.items()}
    S = config.S if config.S is not None else model.spec.S
    keys = np.random.SeedSequence(config.seed).spawn(config.max_steps + 1)
    batch_rng = np.random.default_rng(keys[0]) if config.max_steps else None
    N = model.N
    B = config.batch_size
    if B > N:
        raise ParameterError(f"batch_size {B} exceeds the number of rows {N}")

    trace = FitTrace()
    start = time.perf_counter()
    for step in range(1, config.max_steps + 1):
        batch = None
        if 0 < B < N:
            batch = np.sort(batch_rng.choice(N, size=B, replace=False))
        rng = np.random.default_rng(keys[step])
        value, grads = objective.elbo_and_grad(model, Yt, nu, batch, S, rng, cache=cache)
        if not np.isfinite(value):
            raise DivergedFitError(f"objective became non-finite at step {step}")
        adam_step(trained, grads, moments, step, config)
        if model.spec.nonnegative:
            project_nonnegative(model.W, out=model.W)
            project_nonnegative(model.V, out=model.V)
        trace.elbo.append(value)
        trace.steps = step
        if step >= 20:
            cur = float(np.mean(trace.elbo[-10:]))
            prev = float(np.mean(trace.elbo[-20:-10]))
            if abs(cur - prev) / max(abs(prev), 1.0) < config.rel_tol:
                trace.converged = True
                break
    trace.wall_time = time.perf_counter() - start
    return model, trace


def central_difference(f, x, h):
    """Five-point central difference approximation of df/dx at x."""
    return (f(x - 2 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2 * h)) / (12.0 * h)


def check_gradients(model, data, eps=1e-4, seed=0, S=1, batch=None):
    """Compare analytic ELBO gradients against central finite differences.

    Every evaluation reuses the same Monte Carlo seed, so the stochastic
    objective is a fixed deterministic function during the check. Returns
    (max_discrepancy, per_parameter) where each discrepancy is
    |ga - gf| / max(|ga|, |gf|, 1e-3).
    """
    Yt, nu = training_target(model, data)
    cache = objective.ObjectiveCache(model, Yt)

    def value():
        rng = np.random.default_rng(seed)
        v, _ = objective.elbo_and_grad(
            model, Yt, nu, batch, S, rng, cache=cache, want_grad=False
        )
        return v

    rng = np.random.default_rng(seed)
    _, grads = objective.elbo_and_grad(model, Yt, nu, batch, S, rng, cache=cache)

    per_param = {}
    worst = 0.0
    for name, arr in model.parameters().items():
        ga = grads[name].ravel()
        flat = arr.ravel()
        worst_here = 0.0
        for k in range(flat.size):
            theta = flat[k]
            h = eps * max(1.0, abs(theta))

            def f(x, _k=k, _flat=flat):
                _flat[_k] = x
                try:
                    return value()
                finally:
                    _flat[_k] = theta

            gf = central_difference(f, theta, h)
            d = abs(ga[k] - gf) / max(abs(ga[k]), abs(gf), 1e-3)
            worst_here = max(worst_here, d)
        per_param[name] = worst_here
        worst = max(worst, worst_here)
    return worst, per_param
