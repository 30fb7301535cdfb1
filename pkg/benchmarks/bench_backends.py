"""Timing comparison of the compiled and vectorized kernel variants.

Runs every dispatched kernel pair at a few problem sizes and prints a
table of per-call times plus the speedup of the compiled path. The numba
variants are warmed up before timing so compilation cost is excluded;
pass --include-fit to also time a short end-to-end model fit under both
backends (the fit comparison re-executes this script in a subprocess
with NSF_NO_NUMBA=1, because the backend is fixed at import time).

Usage:
    python benchmarks/bench_backends.py
    python benchmarks/bench_backends.py --include-fit
    NSF_NO_NUMBA=1 python benchmarks/bench_backends.py   # numpy only
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from nsf import backend, kernels, likelihoods


def _time_call(fn, args, repeats=7):
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def _bench_pair(name, loops_py, vectorized, args):
    if backend.HAVE_NUMBA:
        compiled = backend.compile_kernel(loops_py)
        compiled(*args)  # warm the compilation/disk cache
        t_fast = _time_call(compiled, args)
        fast_label = "numba"
    else:
        t_fast = _time_call(loops_py, args)
        fast_label = "python"
    t_numpy = _time_call(vectorized, args)
    return {
        "kernel": name,
        "fast_label": fast_label,
        "fast_s": t_fast,
        "numpy_s": t_numpy,
        "speedup": t_numpy / t_fast if t_fast > 0 else float("inf"),
    }


def run_kernel_benchmarks(sizes):
    rng = np.random.default_rng(0)
    rows = []
    for n in sizes:
        m = max(n // 4, 1)
        A = rng.uniform(-1, 1, size=(n, 2))
        B = rng.uniform(-1, 1, size=(m, 2))
        r = kernels.pairwise_dist(B, A)
        rows.append(_bench_pair(
            f"pairwise_dist {n}x{m}",
            kernels._pairwise_dist_loops, kernels._pairwise_dist_numpy, (A, B),
        ))
        rows.append(_bench_pair(
            f"matern32_terms {m}x{n}",
            kernels._matern32_terms_loops, kernels._matern32_terms_numpy,
            (r, 1.3, 0.4),
        ))
        rows.append(_bench_pair(
            f"sqexp_terms {m}x{n}",
            kernels._sqexp_terms_loops, kernels._sqexp_terms_numpy, (r, 1.3, 0.4),
        ))

        S, J = 3, 200
        y = rng.poisson(4.0, size=(n, J)).astype(np.float64)
        mean = rng.uniform(0.2, 6.0, size=(S, n, J))
        rows.append(_bench_pair(
            f"poisson_terms {S}x{n}x{J}",
            likelihoods._poisson_terms_loops, likelihoods._poisson_terms_numpy,
            (y, mean),
        ))
        phi = rng.uniform(0.5, 20.0, size=J)
        rows.append(_bench_pair(
            f"nb_terms {S}x{n}x{J}",
            likelihoods._nb_terms_loops, likelihoods._nb_terms_numpy,
            (y, mean, phi),
        ))
        sigma2 = rng.uniform(0.3, 2.0, size=J)
        rows.append(_bench_pair(
            f"gaussian_terms {S}x{n}x{J}",
            likelihoods._gaussian_terms_loops, likelihoods._gaussian_terms_numpy,
            (y, mean, sigma2),
        ))
    return rows


def _fit_once():
    from nsf import FitConfig, ModelSpec, build_model, dataset_from_arrays, fit

    rng = np.random.default_rng(1)
    Y = rng.poisson(5.0, size=(400, 120)) + 1
    X = rng.uniform(0, 1, size=(400, 2))
    data = dataset_from_arrays(Y, X)
    spec = ModelSpec(L=4, T=2, M=60, S=3)
    model = build_model(spec, data, seed=0)
    start = time.perf_counter()
    fit(model, data, FitConfig(max_steps=30, seed=0))
    return time.perf_counter() - start


def run_fit_benchmark():
    here = _fit_once()
    label = "numba" if backend.NUMBA_ACTIVE else "numpy"
    print(f"fit 400x120, L=4 T=2 M=60, 30 steps [{label}]: {here:.2f}s")
    if backend.NUMBA_ACTIVE:
        env = dict(os.environ, NSF_NO_NUMBA="1")
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--fit-only"],
            capture_output=True, text=True, env=env,
        )
        print(proc.stdout.strip())
        if proc.returncode != 0:
            print(proc.stderr, file=sys.stderr)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[200, 900, 2500])
    parser.add_argument("--include-fit", action="store_true",
                        help="also time a short end-to-end fit on both backends")
    parser.add_argument("--fit-only", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.fit_only:
        label = "numba" if backend.NUMBA_ACTIVE else "numpy"
        print(f"fit 400x120, L=4 T=2 M=60, 30 steps [{label}]: {_fit_once():.2f}s")
        return

    mode = "numba" if backend.NUMBA_ACTIVE else (
        "numpy (numba unavailable)" if not backend.HAVE_NUMBA else "numpy (NSF_NO_NUMBA)"
    )
    print(f"active backend: {mode}")
    rows = run_kernel_benchmarks(args.sizes)
    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel'.ljust(width)}  {'fast':>10}  {'numpy':>10}  {'speedup':>8}")
    for r in rows:
        print(
            f"{r['kernel'].ljust(width)}  {r['fast_s'] * 1e3:>8.3f}ms"
            f"  {r['numpy_s'] * 1e3:>8.3f}ms  {r['speedup']:>7.1f}x"
        )
    if args.include_fit:
        run_fit_benchmark()


if __name__ == "__main__":
    main()
