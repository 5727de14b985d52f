"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints one ``criterion N: PASS/FAIL`` line through the
``acceptance_report`` fixture; the lines are repeated in the terminal
summary.  Runtime limits are part of each criterion.
"""
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from cpxg.diagnostics import (
    inverse_rate_constant,
    polynomial_constants,
    prop2_bound,
    rate_fit,
    recursion_check,
    summability_report,
)
from cpxg.network import MatrixSchedule, NetworkPool, generate_pool, window_deviation
from cpxg.prox import ProxSpec, h_value, prox
from cpxg.solvers import (
    ErrorSpec,
    RunConfig,
    consensus_schedule,
    run,
    run_central_exact,
    run_central_inexact,
    run_multistep_accelerated,
    solve_optimum,
)
from cpxg.objectives import synth_problem

from oracles import (
    centralized_accelerated,
    centralized_prox_gradient,
    centralized_subgradient,
    prox_l1_grid,
)


# ---------------------------------------------------------------------------
# shared setups


def cert_problem():
    p = synth_problem(5, 20, 30, "logistic", lam=0.01, seed=0)
    solve_optimum(p)
    return p


@pytest.fixture(scope="module")
def cert_run():
    t0 = time.perf_counter()
    p = cert_problem()
    net = generate_pool(5, 5, 0.6, seed=1)
    tr = run_multistep_accelerated(p, net, RunConfig(iterations=50, seed=2, diagnostics=True))
    return p, net, tr, time.perf_counter() - t0


def certify(p, net, tr, schedule="linear"):
    """Criteria 3-5 on one diagnostics trace; returns (ok3, ok4, ok5, details)."""
    e = tr.column("e_norm") - tr.column("e_bound")
    eps = tr.column("eps") - tr.column("eps_bound")
    ok3 = bool(np.all(e <= 1e-10) and np.all(eps <= 1e-10))
    const = polynomial_constants(p, net, tr.meta["alpha"], tr, schedule)
    rep = recursion_check(tr, const, tol=1e-9)
    poly_margin = max(r.sum_q - float(const.poly(r.k)) for r in tr.records if r.k >= 2)
    ok4 = rep.passed and poly_margin <= 0
    summ = summability_report(tr, threshold=1e-6)
    ok5 = summ.ratio_e <= 1e-6 and summ.ratio_eps <= 1e-6
    return ok3, ok4, ok5, dict(e_margin=float(e.max()), eps_margin=float(eps.max()),
                               a=rep.worst("a"), b=rep.worst("b"), c=rep.worst("c"),
                               poly_margin=poly_margin, fitted=const.fitted,
                               ratio_e=summ.ratio_e, ratio_eps=summ.ratio_eps)


# ---------------------------------------------------------------------------
# 1


def test_criterion_01_prox_properties(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 1000
    worst = dict(nonexp=-math.inf, sub_bound=-math.inf, sub_sign=0.0, ineq=-math.inf, oracle=0.0)
    for _ in range(n):
        d = int(rng.integers(1, 6))
        lam, alpha = rng.uniform(0, 3), rng.uniform(0.05, 4)
        h = ProxSpec.l1(lam)
        x, xh = rng.normal(scale=3, size=d), rng.normal(scale=3, size=d)
        y, yh = prox(h, alpha, x), prox(h, alpha, xh)
        worst["nonexp"] = max(worst["nonexp"], np.linalg.norm(y - yh) - np.linalg.norm(x - xh) - 1e-12)
        z = (x - y) / alpha
        worst["sub_bound"] = max(worst["sub_bound"], float(np.max(np.abs(z) - lam)) - 1e-12)
        nz = y != 0
        if nz.any():
            worst["sub_sign"] = max(worst["sub_sign"], float(np.max(np.abs(z[nz] - lam * np.sign(y[nz])))))
        for _ in range(3):
            u = rng.normal(scale=3, size=d)
            lhs = h_value(h, u)
            rhs = h_value(h, y) + (x - y) @ (u - y) / alpha
            worst["ineq"] = max(worst["ineq"], rhs - lhs - 1e-10)
        worst["oracle"] = max(worst["oracle"], float(np.max(np.abs(y - prox_l1_grid(lam, alpha, x)))))
    elapsed = time.perf_counter() - t0
    ok = (worst["nonexp"] <= 0 and worst["sub_bound"] <= 0 and worst["sub_sign"] <= 1e-12
          and worst["ineq"] <= 0 and worst["oracle"] <= 1e-8 and elapsed < 5)
    acceptance_report(1, ok, f"{n} cases, worst nonexpansive margin {worst['nonexp']:.2e}, "
                             f"subgradient {worst['sub_bound']:.2e}/{worst['sub_sign']:.2e}, "
                             f"inequality {worst['ineq']:.2e}, oracle diff {worst['oracle']:.2e}, "
                             f"{elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2


def test_criterion_02_transition_matrix_bound(acceptance_report):
    t0 = time.perf_counter()
    pool = generate_pool(10, 10, 0.3, seed=7)
    worst, violations = -math.inf, 0
    n_sched = 20
    lags = np.arange(1, 201)  # t - s; windows hold t - s + 1 matrices
    bound = pool.bound(lags)
    for s in range(n_sched):
        idx = MatrixSchedule(pool.size, np.random.default_rng(100 + s)).draw(400)
        dev = window_deviation(pool, idx, 201)[1:]
        margin = dev - bound
        violations += int(np.sum(margin > 0))
        worst = max(worst, float(margin.max()))
    elapsed = time.perf_counter() - t0
    acceptance_report(2, violations == 0 and elapsed < 30,
                      f"{n_sched} schedules, lags 1..200, violations {violations}, worst margin {worst:.3e}, "
                      f"{elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 3-5


def test_criterion_03_inexact_reformulation(cert_run, acceptance_report):
    p, net, tr, elapsed = cert_run
    ok3, _, _, det = certify(p, net, tr)
    acceptance_report(3, ok3 and elapsed < 60 and len(tr.records) == 50,
                      f"50 iterations, worst gradient-error margin {det['e_margin']:.3e}, "
                      f"worst prox-error margin {det['eps_margin']:.3e}, {elapsed:.2f}s")


def test_criterion_04_recursions_and_polynomial_bound(cert_run, acceptance_report):
    p, net, tr, _ = cert_run
    _, ok4, _, det = certify(p, net, tr)
    acceptance_report(4, ok4, f"worst margins a {det['a']:.3e} b {det['b']:.3e} c {det['c']:.3e}, "
                              f"polynomial margin {det['poly_margin']:.3e}, "
                              f"{'fitted' if det['fitted'] else 'closed-form'} constants")


def test_criterion_05_summability(cert_run, acceptance_report):
    p, net, tr, _ = cert_run
    _, _, ok5, det = certify(p, net, tr)
    acceptance_report(5, ok5, f"last-quarter ratios {det['ratio_e']:.3e} (k|e|), {det['ratio_eps']:.3e} (k sqrt eps)")


# ---------------------------------------------------------------------------
# 6


def test_criterion_06_rate(acceptance_report):
    t0 = time.perf_counter()
    # d=100 with 10 samples per agent keeps the problem far from strongly convex
    p = synth_problem(5, 100, 10, "logistic", lam=0.01, seed=0)
    solve_optimum(p)
    net = generate_pool(5, 5, 0.6, seed=1)
    tr = run_multistep_accelerated(p, net, RunConfig(budget=2000, seed=2))
    fit = rate_fit(tr, window=0.5)
    C, excess = inverse_rate_constant(tr, window=0.5)
    elapsed = time.perf_counter() - t0
    ok = fit.slope <= -0.9 and excess <= 0.05 and elapsed < 120
    acceptance_report(6, ok, f"tail slope {fit.slope:.3f} over {fit.n_points} points"
                             f"{' (floor hit)' if fit.floor_hit else ''}, C={C:.3e}, "
                             f"worst C/t excess {excess:.3f}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 7


def test_criterion_07_baseline_ordering(acceptance_report):
    t0 = time.perf_counter()
    p = synth_problem(10, 100, 113, "logistic", lam=0.003, seed=1)
    solve_optimum(p)
    net = generate_pool(10, 10, 0.15, seed=2)
    budget = 5000
    names = {"main": "multistep_accelerated", "after_prox": "multistep_after_prox",
             "subgradient": "basic_subgradient", "proxgrad": "basic_proxgrad",
             "singlestep": "accelerated_singlestep"}
    gaps = {}
    for key, algo in names.items():
        tr = run(p, net, RunConfig(algorithm=algo, budget=budget, seed=3))
        t = np.array([r.t for r in tr.records])
        g = tr.column("f_gap")
        gaps[key] = (g[-1], float(np.min(g[t >= budget / 2])))
    elapsed = time.perf_counter() - t0
    main_final = gaps["main"][0]
    ap_final, ap_plateau = gaps["after_prox"]
    plateau_15, plateau_16 = gaps["subgradient"][1], gaps["proxgrad"][1]
    ok = (main_final < ap_final < min(plateau_15, plateau_16)
          and ap_plateau >= 10 * main_final and elapsed < 300)
    acceptance_report(7, ok, f"terminal gaps main {main_final:.3e} < after-prox {ap_final:.3e} "
                             f"(tail min {ap_plateau:.3e}, {ap_plateau / main_final:.0f}x) < "
                             f"subgradient {plateau_15:.3e} / proxgrad {plateau_16:.3e}; "
                             f"single-step {gaps['singlestep'][0]:.3e} recorded; {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 8


def test_criterion_08_inexact_bound(acceptance_report):
    t0 = time.perf_counter()
    p = cert_problem()
    x0_dist = float(np.linalg.norm(p.x_star))
    e_only = [(0.1, 0.9), (1.0, 0.5), (0.5, 0.8)]
    eps_only = [(0.01, 0.8), (0.1, 0.5), (0.05, 0.9)]
    specs = ([ErrorSpec(c, r, 0.0, 0.0) for c, r in e_only]
             + [ErrorSpec(0.0, 0.0, c, r) for c, r in eps_only]
             + [ErrorSpec(a[0], a[1], b[0], b[1]) for a, b in zip(e_only, eps_only)])
    worst = -math.inf
    held = 0
    for spec in specs:
        tr = run_central_inexact(p, RunConfig("central_inexact", iterations=100, seed=3), spec)
        b = prop2_bound(tr, p.L, x0_dist)
        worst = max(worst, float(b.margins().max()))
        held += b.holds and len(tr.records) == 100
    tr = run_central_exact(p, RunConfig("central_exact", iterations=100))
    n = np.arange(1, 101)
    exact_bound = 2 * p.L * x0_dist ** 2 / (n + 1.0) ** 2
    exact_ratio = float(np.max(tr.column("f_gap") / exact_bound))
    elapsed = time.perf_counter() - t0
    ok = held == len(specs) and exact_ratio <= 1 and elapsed < 30
    acceptance_report(8, ok, f"{held}/{len(specs)} error specs hold for n<=100 (worst margin {worst:.3e}), "
                             f"exact run max gap/bound {exact_ratio:.3f}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 9


def test_criterion_09_logarithmic_schedule(acceptance_report):
    p = cert_problem()
    net = generate_pool(5, 5, 0.6, seed=1)
    n = 10
    linear_steps = n * (n + 1) // 2
    log_steps = sum(consensus_schedule("logarithmic", k, log_gamma=net.log_gamma) for k in range(1, n + 1))
    try:
        tr = run_multistep_accelerated(p, net, RunConfig(iterations=50, seed=2, diagnostics=True,
                                                         schedule="logarithmic"))
    except RuntimeError as exc:
        acceptance_report(9, False, f"theoretical gamma = 1 - {-math.expm1(net.log_gamma):.3e}: {exc}; "
                                    f"{log_steps:.3e} steps for n={n} vs {linear_steps} linear")
        return
    ok3, ok4, ok5, _ = certify(p, net, tr, "logarithmic")
    fewer = log_steps < linear_steps
    acceptance_report(9, ok3 and ok4 and ok5 and fewer,
                      f"criteria 3-5: {ok3}/{ok4}/{ok5}, steps for n={n}: {log_steps} vs {linear_steps} linear")


def test_logarithmic_schedule_with_empirical_gamma():
    """Informational companion of criterion 9: the schedule with a measured rate."""
    p = cert_problem()
    net = generate_pool(5, 5, 0.6, seed=1)
    tr = run_multistep_accelerated(p, net, RunConfig(iterations=50, seed=2, diagnostics=True,
                                                     schedule="logarithmic", gamma_source="empirical"))
    assert tr.meta["gamma_heuristic"]
    ok3, ok4, ok5, det = certify(p, net, tr, "logarithmic")
    print(f"empirical gamma {math.exp(tr.meta['log_gamma_schedule']):.4f}: criteria 3/4/5 {ok3}/{ok4}/{ok5}, "
          f"steps for 10 iterations {sum(r.s_k for r in tr.records[:10])} vs 55 linear, {det}")
    assert ok3 and ok4


# ---------------------------------------------------------------------------
# 10


def test_criterion_10_determinism_and_reductions(tmp_path, acceptance_report):
    args = ["--agents", "4", "--dim", "10", "--samples", "10", "--pool-size", "4", "--budget", "200",
            "--seed", "5", "--diagnostics", "true"]
    csvs = []
    for i in range(2):
        out = tmp_path / f"r{i}"
        res = subprocess.run([sys.executable, "-m", "cpxg", "run", *args, "--out", str(out)],
                             capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        csvs.append((out / "trace.csv").read_bytes())
    identical = csvs[0] == csvs[1]

    p = synth_problem(1, 8, 25, "logistic", lam=0.02, seed=11)
    single = NetworkPool.from_matrices(np.ones((1, 1, 1)))
    n, alpha, x0 = 40, 1.0 / p.L, np.zeros(p.d)
    refs = {
        "multistep_accelerated": centralized_accelerated(p.smooth_gradient, p.lam, alpha, x0, n),
        "accelerated_singlestep": centralized_accelerated(p.smooth_gradient, p.lam, alpha, x0, n),
        "multistep_after_prox": centralized_accelerated(p.smooth_gradient, p.lam, alpha, x0, n),
        "basic_proxgrad": centralized_prox_gradient(p.smooth_gradient, p.lam, alpha, x0, n),
        "basic_subgradient": centralized_subgradient(p.smooth_gradient, p.lam, alpha, x0, n),
    }
    central = run_central_exact(p, RunConfig("central_exact", iterations=n, keep_iterates=True)).iterates
    worst = 0.0
    for algo, ref in refs.items():
        it = run(p, single, RunConfig(algorithm=algo, iterations=n, budget=10**6, keep_iterates=True)).iterates
        worst = max(worst, float(np.max(np.abs(it - ref))))
        if algo in ("multistep_accelerated", "accelerated_singlestep", "multistep_after_prox"):
            worst = max(worst, float(np.max(np.abs(it - central))))
    acceptance_report(10, identical and worst <= 1e-12,
                      f"CSV byte-identical: {identical}, m=1 worst per-iteration difference {worst:.2e} "
                      f"over {len(refs)} methods")
