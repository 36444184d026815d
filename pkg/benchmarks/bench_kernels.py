"""Benchmark the numba kernels against the pure-numpy fallback path.

Run:  python benchmarks/bench_kernels.py [--n 1000] [--p 24] [--loops 20]

Micro benchmarks time each hot kernel on study-sized inputs.  The macro
benchmark times a full dataset generation plus one fit per working
correlation on each backend by swapping the active kernel set in place.
"""

import argparse
import time

import numpy as np

from geehd import _kernels as K
from geehd.estimator import fit_gee
from geehd.model import BINARY_LOGIT
from geehd.simulate import SimDesign, gen_dataset, outcome_matrix

KERNELS = [
    "score_info",
    "score_only",
    "middle_matrix",
    "jacobian_extra",
    "ar1_path",
    "logit_bahadur_cells",
    "chol_lower",
]


def _inputs(n, m, p, rng):
    mu = rng.uniform(0.2, 0.8, (n, m))
    Y = (rng.random((n, m)) < mu).astype(float)
    X = rng.standard_normal((n, m, p))
    sq = np.sqrt(mu * (1 - mu))
    cratio = np.ascontiguousarray(1.0 - 2.0 * mu)
    R = 0.5 * np.ones((m, m)) + 0.5 * np.eye(m)
    Rinv = np.linalg.inv(R)
    G = rng.standard_normal((p, p))
    spd = G @ G.T + p * np.eye(p)
    z = rng.standard_normal((m, p))
    beta = 0.3 * rng.standard_normal(p)
    out = outcome_matrix(m)
    return {
        "score_info": (Y, X, mu, sq, Rinv),
        "score_only": (Y, X, mu, sq, Rinv),
        "middle_matrix": (Y, X, mu, sq, Rinv),
        "jacobian_extra": (Y, X, mu, sq, cratio, Rinv),
        "ar1_path": (z, 0.5, 0.447),
        "logit_bahadur_cells": (z, beta, 0.5, out),
        "chol_lower": (spd, 1e-12),
    }


def _time(fn, args, loops):
    fn(*args)  # warmup / compile
    t0 = time.perf_counter()
    for _ in range(loops):
        fn(*args)
    return (time.perf_counter() - t0) / loops


def micro(n, p, loops):
    rng = np.random.default_rng(0)
    args = _inputs(n, 3, p, rng)
    print(f"kernel micro benchmarks (n={n}, m=3, p={p}, {loops} loops)")
    print(f"{'kernel':22s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name in KERNELS:
        t_np = _time(getattr(K, name + "_numpy"), args[name], loops)
        if K.HAVE_NUMBA:
            t_nb = _time(getattr(K, "_" + name + "_nb"), args[name], loops)
            print(f"{name:22s} {t_np * 1e3:9.3f}ms {t_nb * 1e3:9.3f}ms {t_np / t_nb:7.1f}x")
        else:
            print(f"{name:22s} {t_np * 1e3:9.3f}ms {'n/a':>10s}")


def _swap(to_numpy):
    for name in KERNELS + ["bahadur_cells", "logit_bahadur_parts"]:
        src = name + "_numpy" if to_numpy else "_" + name + "_nb"
        if hasattr(K, src):
            setattr(K, name, getattr(K, src))


def macro(n, p):
    design = SimDesign(n=n, p_override=p, seed=7, max_regen_rate=1.0)
    results = {}
    backends = ["numpy"] + (["numba"] if K.HAVE_NUMBA else [])
    for backend in backends:
        _swap(backend == "numpy")
        try:
            t0 = time.perf_counter()
            data, beta0, _ = gen_dataset(design, 0)
            t_gen = time.perf_counter() - t0
            t0 = time.perf_counter()
            for kind in ("independence", "exchangeable", "ar1", "unstructured"):
                fit = fit_gee(data, BINARY_LOGIT, kind)
                assert fit.converged
            t_fit = time.perf_counter() - t0
            results[backend] = (t_gen, t_fit)
        finally:
            _swap(not K.USE_NUMBA)
    print(f"\nmacro benchmark: generation + four fits at n={n}, p={p}")
    for backend, (t_gen, t_fit) in results.items():
        print(f"{backend:6s} generate {t_gen * 1e3:8.1f}ms   fit x4 {t_fit * 1e3:8.1f}ms")
    if len(results) == 2:
        g0, f0 = results["numpy"]
        g1, f1 = results["numba"]
        print(f"speedup: generate {g0 / g1:.1f}x, fit {f0 / f1:.1f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--p", type=int, default=24)
    ap.add_argument("--loops", type=int, default=20)
    ap.add_argument("--skip-macro", action="store_true")
    args = ap.parse_args()
    print(f"active backend: {K.active_backend()}")
    micro(args.n, args.p, args.loops)
    if not args.skip_macro:
        macro(args.n, args.p)


if __name__ == "__main__":
    main()
