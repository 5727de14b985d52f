#!/usr/bin/env python3
"""Numba vs numpy timings for the hot kernels, plus one end-to-end run per backend.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

The end-to-end rows spawn a fresh interpreter per backend because the
backend is fixed at import time by CPXG_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cpxg import _accel
from cpxg.network import MatrixSchedule, generate_pool


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(200_000)
    pool = generate_pool(10, 10, 0.3, seed=1)
    vals = rng.standard_normal((10, 100))
    idx = MatrixSchedule(pool.size, np.random.default_rng(2)).draw(2000)
    widx = MatrixSchedule(pool.size, np.random.default_rng(3)).draw(400)
    cases = [
        ("soft_threshold n=2e5", lambda f: f(x, 0.3), "soft_threshold"),
        ("mix_rounds 2000 rounds m=10 d=100", lambda f: f(vals, pool.matrices, idx), "mix_rounds"),
        ("window_deviation 200 windows", lambda f: f(pool.matrices, widx, 201, 200), "window_deviation"),
        ("poly_geo_partial N=3 gamma=0.999", lambda f: f(3, 0.999, 1e-14, 50_000_000), "poly_geo_partial"),
    ]
    rows = []
    for label, call, name in cases:
        f_np = getattr(_accel, name + "_numpy")
        f_nb = getattr(_accel, name + "_numba")
        call(f_nb)  # compile outside the timing
        r_np, r_nb = call(f_np), call(f_nb)
        a = np.asarray(r_np[0] if isinstance(r_np, tuple) else r_np)
        b = np.asarray(r_nb[0] if isinstance(r_nb, tuple) else r_nb)
        err = float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(a)))))
        rows.append((label, best_of(lambda: call(f_np), repeat), best_of(lambda: call(f_nb), repeat), err))
    return rows


def end_to_end(disable):
    env = dict(os.environ, CPXG_DISABLE_NUMBA="1" if disable else "0")
    code = (
        "import time; from cpxg import *; "
        "p = synth_problem(10, 100, 113, 'logistic', lam=0.01, seed=0); "
        "net = generate_pool(10, 10, 0.3, seed=1); "
        "run_multistep_accelerated(p, net, RunConfig(budget=50)); "
        "t0 = time.perf_counter(); "
        "run_multistep_accelerated(p, net, RunConfig(budget=5000, seed=2)); "
        "print(time.perf_counter() - t0)"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'kernel':<36} {'numpy (s)':>10} {'numba (s)':>10} {'speedup':>8} {'rel diff':>10}")
    print("-" * 80)
    for label, t_np, t_nb, err in kernel_rows(args.repeat):
        print(f"{label:<36} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>7.1f}x {err:>10.1e}")
    t_np, t_nb = end_to_end(True), end_to_end(False)
    print(f"{'main method, budget 5000, m=10 d=100':<36} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>7.1f}x {'':>10}")


if __name__ == "__main__":
    main()
