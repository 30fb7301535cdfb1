"""Command-line interface: simulate, fit, eval, postprocess.

Each subcommand writes its outputs under --out. All randomness flows
from --seed; repeated runs with the same inputs and seed produce
byte-identical report metrics and tables.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .exceptions import NsfError, ShapeError, UnsupportedModelError
from .models import ModelSpec, build_model, factor_point_estimates
from .optimizer import FitConfig, fit
from .pipeline import (
    CountDataset,
    RunReport,
    evaluate,
    load_dataset,
    load_model,
    save_model,
    select_features,
    train_val_split,
    training_deviance,
)
from .postprocess import (
    feature_spatial_scores,
    observation_spatial_scores,
    simplex_normalize,
    top_features,
)
from .simulate import SimConfig, simulate_ggblocks, simulate_quilt

_MODEL_KINDS = {
    "fa": (False, lambda L: 0, "gaussian"),
    "pnmf": (True, lambda L: 0, "poisson"),
    "rsf": (False, lambda L: L, "gaussian"),
    "nsf": (True, lambda L: L, "poisson"),
    "nsfh": (True, lambda L: L // 2, "poisson"),
}

_LIK_FLAGS = {"poi": "poisson", "nb": "negative_binomial", "gau": "gaussian"}


def _g17(v):
    return format(float(v), ".17g")


def _write_table(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _write_matrix(path, mat, header):
    rows = ([_g17(v) for v in row] for row in np.atleast_2d(mat))
    _write_table(path, header, rows)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="nsf",
        description="Nonnegative and real-valued spatial factorization of count data",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic benchmark dataset")
    p.add_argument("--kind", choices=("ggblocks", "quilt"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", type=int, default=500)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit a factor model to counts + coordinates")
    p.add_argument("--counts", required=True)
    p.add_argument("--coords", required=True)
    p.add_argument("--model", choices=sorted(_MODEL_KINDS), required=True)
    p.add_argument("-L", type=int, required=True, help="total number of components")
    p.add_argument("-T", type=int, default=None, help="spatial components (nsfh)")
    p.add_argument("--lik", choices=sorted(_LIK_FLAGS), default=None)
    p.add_argument("--kernel", choices=("matern32", "sqexp"), default="matern32")
    p.add_argument("-M", type=int, default=None, help="inducing points (default min(N, 500))")
    p.add_argument("-S", type=int, default=3, help="Monte Carlo samples per step")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=0, help="0 means full batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-top", type=int, default=None, help="keep the n most informative features")
    p.add_argument("--split-frac", type=float, default=0.95, help="train fraction; 1.0 disables the holdout")
    p.add_argument("--min-total", type=int, default=100, help="drop observations with smaller totals")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a saved model on held-out observations")
    p.add_argument("--model-archive", required=True)
    p.add_argument("--counts", required=True)
    p.add_argument("--coords", required=True)
    p.add_argument("--split-seed", type=int, default=None, help="re-split instead of using the archived holdout")
    p.add_argument("--min-total", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("postprocess", help="normalized factors, loadings, and spatial scores")
    p.add_argument("--model-archive", required=True)
    p.add_argument("--top-k", type=int, required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_simulate(args):
    cfg = SimConfig(J=args.features, seed=args.seed)
    sim = simulate_ggblocks(cfg) if args.kind == "ggblocks" else simulate_quilt(cfg)
    out = args.out
    os.makedirs(out, exist_ok=True)
    _write_table(
        os.path.join(out, "counts.csv"),
        sim.feature_names,
        ([str(int(v)) for v in row] for row in sim.Y),
    )
    _write_matrix(os.path.join(out, "coords.csv"), sim.X, ["x", "y"])
    P = sim.spatial_patterns.shape[0]
    _write_table(
        os.path.join(out, "truth_spatial.csv"),
        [f"s{p + 1}" for p in range(P)],
        ([str(int(v)) for v in col] for col in sim.spatial_patterns.T),
    )
    Q = sim.nonspatial_patterns.shape[0]
    _write_table(
        os.path.join(out, "truth_nonspatial.csv"),
        [f"u{q + 1}" for q in range(Q)],
        ([str(int(v)) for v in col] for col in sim.nonspatial_patterns.T),
    )
    _write_table(
        os.path.join(out, "assignments.csv"),
        ["feature", "spatial_pattern", "nonspatial_pattern"],
        (
            [sim.feature_names[j], str(int(sim.spatial_assignments[j]) + 1),
             str(int(sim.nonspatial_assignments[j]) + 1)]
            for j in range(len(sim.feature_names))
        ),
    )
    meta = {
        "kind": sim.kind,
        "N": int(sim.Y.shape[0]),
        "J": int(sim.Y.shape[1]),
        "seed": args.seed,
        "spatial_intensity": cfg.spatial_intensity,
        "background": cfg.background,
        "nonspatial_intensity": cfg.nonspatial_intensity,
        "nb_shape": cfg.nb_shape,
    }
    with open(os.path.join(out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {sim.kind} dataset ({sim.Y.shape[0]} x {sim.Y.shape[1]}) to {out}")
    return 0


def _cmd_fit(args, parser):
    if args.L < 1:
        parser.error("-L must be >= 1")
    if not 0 < args.split_frac <= 1:
        parser.error("--split-frac must lie in (0, 1]")
    nonneg, default_T, default_lik = _MODEL_KINDS[args.model]
    T = default_T(args.L) if args.T is None else args.T
    if args.model != "nsfh" and args.T is not None and args.T != default_T(args.L):
        parser.error(f"-T cannot be {args.T} for model {args.model}")
    family = _LIK_FLAGS[args.lik] if args.lik else default_lik

    started = time.perf_counter()
    data = load_dataset(args.counts, args.coords, min_total=args.min_total)
    if args.n_top is not None:
        data = select_features(data, args.n_top)
    if args.split_frac < 1.0:
        train, val = train_val_split(data, frac=args.split_frac, seed=args.seed)
    else:
        train, val = data, None

    M = args.M if args.M is not None else min(train.N, 500)
    spec = ModelSpec(
        L=args.L, T=T, nonnegative=nonneg, likelihood=family,
        kernel=args.kernel, M=M, S=args.S,
    )
    model = build_model(spec, train, seed=args.seed)
    config = FitConfig(
        learning_rate=args.lr,
        max_steps=args.max_steps,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    model, trace = fit(model, train, config)

    metrics = {
        "elbo_trace": [float(v) for v in trace.elbo],
        "converged": trace.converged,
        "steps": trace.steps,
        "n_train": train.N,
        "n_val": 0 if val is None else val.N,
    }
    metrics.update(training_deviance(model, train))
    flags = {}
    if val is not None:
        ev = evaluate(model, val)
        flags = ev.pop("flags")
        ev.pop("n_validation")
        metrics.update(ev)
    else:
        metrics["sparsity"] = float(np.mean(np.hstack([model.W, model.V]) == 0.0))
    metrics["flags"] = flags

    os.makedirs(args.out, exist_ok=True)
    archive = os.path.join(args.out, "model.npz")
    data._ensure_stats()
    save_model(
        model,
        archive,
        val_indices=None if val is None else val.row_indices,
        norm_median=data.norm_median,
        norm_col_means=data.norm_col_means,
    )
    report = RunReport(
        command="fit",
        seed=args.seed,
        config={
            **model.config_dict(),
            "learning_rate": args.lr,
            "max_steps": args.max_steps,
            "batch_size": args.batch_size,
            "split_frac": args.split_frac,
            "n_top": args.n_top,
            "min_total": args.min_total,
            "counts": args.counts,
            "coords": args.coords,
        },
        metrics=metrics,
        timing={"wall_time_s": time.perf_counter() - started, "fit_s": trace.wall_time},
    )
    report.write(os.path.join(args.out, "report.json"))
    parts = [
        f"fit {spec.kind} L={spec.L} T={spec.T} on {train.N} x {train.J}",
        f"elbo={trace.elbo[-1]:.4f}" if trace.elbo else "elbo=n/a",
        f"train_dev={metrics['training_deviance_mean']:.4f}",
    ]
    if val is not None:
        parts.append(f"val_dev={metrics['validation_deviance_mean']:.4f}")
    parts.append(f"steps={trace.steps}{' (converged)' if trace.converged else ''}")
    print("  ".join(parts))
    print(f"archive: {archive}")
    return 0


def _align_features(data, model):
    if data.J == model.J:
        return data
    if not model.feature_names:
        raise ShapeError(
            f"dataset has {data.J} features, model has {model.J}, and the "
            "archive carries no feature names to align by"
        )
    pos = {n: j for j, n in enumerate(data.feature_names)}
    try:
        cols = np.array([pos[n] for n in model.feature_names], dtype=np.intp)
    except KeyError as exc:
        raise ShapeError(f"dataset is missing model feature {exc.args[0]!r}") from None
    return CountDataset(
        Y=data.Y[:, cols].copy(),
        X=data.X,
        nu=data.nu,
        feature_names=list(model.feature_names),
        row_indices=data.row_indices,
    )


def _cmd_eval(args):
    model, info = load_model(args.model_archive)
    data = load_dataset(args.counts, args.coords, min_total=args.min_total)
    data = _align_features(data, model)
    if "norm_median" in info:
        data.norm_median = info["norm_median"]
    if "norm_col_means" in info:
        data.norm_col_means = info["norm_col_means"]

    if args.split_seed is not None:
        _, val = train_val_split(data, frac=0.95, seed=args.split_seed)
        origin = f"fresh 95/5 split (seed {args.split_seed})"
    elif "val_indices" in info:
        mask = np.isin(data.row_indices, info["val_indices"])
        if not mask.any():
            raise ShapeError("archived holdout rows are absent from this dataset")
        val = data.subset(np.nonzero(mask)[0])
        origin = "archived holdout"
    else:
        val = data
        origin = "all rows (no archived holdout)"

    metrics = evaluate(model, val)
    flags = metrics.pop("flags")
    metrics["flags"] = flags
    os.makedirs(args.out, exist_ok=True)
    report = RunReport(
        command="eval",
        seed=0 if args.split_seed is None else args.split_seed,
        config={**info["config"], "counts": args.counts, "coords": args.coords,
                "validation_rows": origin},
        metrics=metrics,
        timing={},
    )
    report.write(os.path.join(args.out, "report.json"))
    print(
        f"eval on {metrics['n_validation']} rows ({origin}): "
        f"deviance_mean={metrics['validation_deviance_mean']:.4f}"
    )
    return 0


def _cmd_postprocess(args):
    model, _ = load_model(args.model_archive)
    if not model.spec.nonnegative:
        raise UnsupportedModelError("postprocess supports nonnegative models only")
    J = model.J
    if not 1 <= args.top_k <= J:
        raise NsfError(f"--top-k must lie in [1, {J}]")
    SF, NF = factor_point_estimates(model, rows=np.arange(model.N))
    A = np.hstack([SF, NF])
    B = np.hstack([model.W, model.V])
    pf = simplex_normalize(A, B, "spde")
    gamma = feature_spatial_scores(model.W, model.V, SF, NF)
    rho = observation_spatial_scores(model.W, model.V, SF, NF)
    names = model.feature_names or [f"f{j + 1:04d}" for j in range(J)]
    comp_names = [f"comp_{int(l) + 1:02d}" for l in pf.kept]

    out = args.out
    os.makedirs(out, exist_ok=True)
    _write_matrix(os.path.join(out, "factors.csv"), pf.F_hat, comp_names)
    _write_table(
        os.path.join(out, "loadings.csv"),
        ["feature"] + comp_names,
        ([names[j]] + [_g17(v) for v in pf.W_hat[j]] for j in range(J)),
    )
    _write_table(
        os.path.join(out, "scores_features.csv"),
        ["feature", "gamma"],
        ([names[j], _g17(gamma[j])] for j in range(J)),
    )
    _write_table(
        os.path.join(out, "scores_observations.csv"),
        ["observation", "x", "y", "rho"],
        (
            [str(i + 1), _g17(model.X[i, 0]), _g17(model.X[i, 1] if model.X.shape[1] > 1 else 0.0),
             _g17(rho[i])]
            for i in range(model.N)
        ),
    )
    rows = []
    for c, l in enumerate(pf.kept):
        idx = top_features(pf.W_hat, c, args.top_k)
        for rank, j in enumerate(idx, start=1):
            rows.append([f"comp_{int(l) + 1:02d}", str(rank), names[j], _g17(pf.W_hat[j, c])])
    _write_table(
        os.path.join(out, "top_features.csv"),
        ["component", "rank", "feature", "weight"],
        rows,
    )
    maps = []
    for c, l in enumerate(pf.kept):
        for i in range(model.N):
            maps.append(
                [_g17(model.X[i, 0]), _g17(model.X[i, 1] if model.X.shape[1] > 1 else 0.0),
                 str(int(l) + 1), _g17(pf.F_hat[i, c])]
            )
    _write_table(
        os.path.join(out, "factor_maps.csv"), ["x", "y", "component", "value"], maps
    )
    print(f"wrote {len(comp_names)} normalized components to {out}")
    return 0


def run_cli(argv):
    """Dispatch one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "fit":
            return _cmd_fit(args, parser)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "postprocess":
            return _cmd_postprocess(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NsfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


def main():
    sys.exit(run_cli(sys.argv[1:]))
