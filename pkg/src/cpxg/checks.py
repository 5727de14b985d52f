"""Desk-scale invariant battery behind ``cpxg check``.

Every check returns a ``CheckResult`` with a signed margin; a check
passes when its margin is at most zero (the margin is "how far past the
tolerance" the worst case landed).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import _accel
from .diagnostics import (
    polynomial_constants,
    prop2_bound,
    rate_fit,
    recursion_check,
    summability_report,
)
from .network import (
    MatrixSchedule,
    NetworkPool,
    generate_pool,
    multi_step_consensus,
    transition_matrix,
    validate_assumption2,
    window_deviation,
)
from .objectives import synth_problem
from .prox import ProxSpec, h_value, prox, prox_gap
from .solvers import (
    ErrorSpec,
    RunConfig,
    run,
    run_central_exact,
    run_central_inexact,
    run_multistep_accelerated,
    solve_optimum,
)

SCOPES = ("all", "proxcore", "netmodel", "objectives", "solvers", "diagnostics")
FAULTS = ("prox_identity",)


@dataclass
class CheckResult:
    scope: str
    name: str
    margin: float
    detail: str = ""
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.margin <= 0.0)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.scope:<11} {self.name:<34} margin={self.margin: .3e}  {self.detail}"


def inject_fault(name: str) -> None:
    """Swap a kernel for a broken one (mutation sanity of the battery)."""
    if name == "prox_identity":
        _accel.soft_threshold = lambda x, thresh: np.array(x, dtype=np.float64, copy=True)
    else:
        raise ValueError(f"unknown fault {name!r}; choose from {FAULTS}")


def prox_oracle(lam: float, alpha: float, x) -> np.ndarray:
    """Per-coordinate numeric minimisation of ``lam |z| + (z - x)^2 / (2 alpha)``.

    A 2001-point grid brackets the minimiser, then bisection on the
    one-sided derivatives narrows the bracket to machine precision.
    """
    out = np.empty(len(x))
    for i, xi in enumerate(x):
        half = abs(xi) + alpha * lam + 1.0
        grid = np.linspace(xi - half, xi + half, 2001)
        vals = lam * np.abs(grid) + (grid - xi) ** 2 / (2.0 * alpha)
        j = int(np.argmin(vals))
        a, b = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
        z = 0.5 * (a + b)
        for _ in range(200):
            z = 0.5 * (a + b)
            right = (lam if z >= 0 else -lam) + (z - xi) / alpha
            left = (lam if z > 0 else -lam) + (z - xi) / alpha
            if right < 0:
                a = z
            elif left > 0:
                b = z
            else:
                break
            if b - a <= 0:
                break
        out[i] = z
    return out


# ---------------------------------------------------------------------------
# proxcore


def _prox_checks(rng):
    res = []
    worst_ne = -math.inf
    worst_sub = -math.inf
    worst_c = -math.inf
    worst_gap = -math.inf
    for _ in range(1000):
        d = int(rng.integers(1, 8))
        lam = float(rng.uniform(0.0, 2.0))
        alpha = float(rng.uniform(0.05, 3.0))
        h = ProxSpec.l1(lam)
        x, xh, u = rng.normal(scale=2.0, size=(3, d))
        y, yh = prox(h, alpha, x), prox(h, alpha, xh)
        worst_ne = max(worst_ne, np.linalg.norm(y - yh) - np.linalg.norm(x - xh) - 1e-12)
        z = (x - y) / alpha
        on = y != 0
        sub = max(float(np.max(np.abs(z) - lam - 1e-12)),
                  float(np.max(np.abs(z[on] - lam * np.sign(y[on])), initial=0.0)) - 1e-10)
        worst_sub = max(worst_sub, sub)
        worst_c = max(worst_c, h_value(h, y) + float((x - y) @ (u - y)) / alpha - h_value(h, u) - 1e-10)
        worst_gap = max(worst_gap, prox_gap(h, alpha, x, y) - 1e-12)
    res.append(("nonexpansive", worst_ne, "1000 random pairs"))
    res.append(("subgradient_characterization", worst_sub, "|z| <= lam, z = lam sign(y) on support"))
    res.append(("subgradient_inequality", worst_c, "h(u) >= h(y) + <x-y, u-y>/alpha"))
    res.append(("gap_at_exact_prox", worst_gap, "prox_gap(c, prox(c)) = 0"))
    worst_o = -math.inf
    for _ in range(200):
        d = int(rng.integers(1, 6))
        lam, alpha = float(rng.uniform(0.0, 2.0)), float(rng.uniform(0.1, 2.0))
        x = rng.normal(scale=2.0, size=d)
        diff = np.max(np.abs(prox(ProxSpec.l1(lam), alpha, x) - prox_oracle(lam, alpha, x)))
        worst_o = max(worst_o, diff - 1e-8)
    res.append(("numeric_oracle", worst_o, "200 cases, d <= 5"))
    return res


# ---------------------------------------------------------------------------
# netmodel


def _net_checks(rng):
    res = []
    pool = generate_pool(10, 10, 0.3, seed=7)
    rep = validate_assumption2(pool)
    res.append(("assumption2", 0.0 if rep.passed else 1.0, "; ".join(rep.failures) or "generated m=10 pool"))
    worst_avg = -math.inf
    worst_ds = -math.inf
    sched = MatrixSchedule(pool.size, np.random.default_rng(11))
    for _ in range(20):
        v = rng.normal(size=(10, 5))
        out, mats = multi_step_consensus(v, pool, 50, sched)
        worst_avg = max(worst_avg, float(np.max(np.abs(out.mean(0) - v.mean(0)))) - 1e-10)
        phi = transition_matrix(mats)
        worst_ds = max(worst_ds, float(np.max(np.abs(phi.sum(0) - 1))) - 1e-10,
                       float(np.max(np.abs(phi.sum(1) - 1))) - 1e-10)
    res.append(("average_preservation", worst_avg, "50-round stages"))
    res.append(("products_doubly_stochastic", worst_ds, "50-matrix products"))
    worst = -math.inf
    for s in range(20):
        idx = MatrixSchedule(pool.size, np.random.default_rng(1000 + s)).draw(400)
        dev = window_deviation(pool, idx, 201)
        with np.errstate(over="ignore"):
            b = pool.bound(np.arange(201))
        worst = max(worst, float(np.max(dev[1:] - b[1:])))
    res.append(("transition_bound", worst, "1 <= t-s <= 200, 20 schedules"))
    return res


# ---------------------------------------------------------------------------
# objectives


def _obj_checks(rng):
    res = []
    p = synth_problem(3, 8, 20, "logistic", lam=0.05, seed=5)
    q = synth_problem(3, 8, 20, "least_squares", lam=0.05, seed=5)
    worst_fd = -math.inf
    for prob in (p, q):
        for comp in prob.components:
            for _ in range(20):
                x = rng.normal(size=8)
                g = comp.gradient(x)
                fd = np.array([(comp.value(x + 1e-6 * e) - comp.value(x - 1e-6 * e)) / 2e-6 for e in np.eye(8)])
                worst_fd = max(worst_fd, float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-8)) - 1e-5)
    res.append(("gradient_finite_difference", worst_fd, "central differences, h=1e-6"))
    worst_l = -math.inf
    worst_g = -math.inf
    for comp in p.components + q.components:
        L = comp.lipschitz_constant()
        for _ in range(50):
            x, y = rng.normal(scale=3.0, size=(2, 8))
            lhs = np.linalg.norm(comp.gradient(x) - comp.gradient(y))
            worst_l = max(worst_l, lhs - L * np.linalg.norm(x - y) * (1 + 1e-9))
    for comp in p.components:
        G = comp.gradient_bound()
        for _ in range(200):
            x = rng.normal(scale=10.0 ** rng.uniform(-2, 3), size=8)
            worst_g = max(worst_g, float(np.linalg.norm(comp.gradient(x))) - G)
    res.append(("lipschitz_certificate", worst_l, "random pairs"))
    res.append(("gradient_bound", worst_g, "logistic, points of arbitrary norm"))
    worst_cv = -math.inf
    for _ in range(100):
        x, y = rng.normal(scale=3.0, size=(2, 8))
        th = float(rng.uniform())
        worst_cv = max(worst_cv, p.objective(th * x + (1 - th) * y) - th * p.objective(x)
                       - (1 - th) * p.objective(y) - 1e-10)
    res.append(("convexity", worst_cv, "random segments"))
    return res


# ---------------------------------------------------------------------------
# solvers and diagnostics share one certified run


class _Fixture:
    def __init__(self):
        self.p = synth_problem(5, 20, 30, "logistic", lam=0.01, seed=0)
        solve_optimum(self.p)
        self.net = generate_pool(5, 5, 0.6, seed=1)
        self.alpha = 1.0 / self.p.L
        self.trace = run_multistep_accelerated(self.p, self.net, RunConfig(iterations=50, diagnostics=True, seed=2))


def _solver_checks(rng, fx):
    res = []
    p1 = synth_problem(1, 10, 30, "logistic", lam=0.02, seed=3)
    solve_optimum(p1)
    one = NetworkPool.from_matrices(np.ones((1, 1, 1)))
    ce = run_central_exact(p1, RunConfig(algorithm="central_exact", iterations=30, keep_iterates=True))
    worst = -math.inf
    for algo in ("multistep_accelerated", "accelerated_singlestep", "multistep_after_prox"):
        tr = run(p1, one, RunConfig(algorithm=algo, iterations=30, keep_iterates=True))
        worst = max(worst, float(np.max(np.abs(tr.iterates - ce.iterates))) - 1e-12)
    res.append(("single_agent_reduction", worst, "m=1 vs centralized, 30 iterations"))
    tr = fx.trace
    budget_err = abs(tr.total_steps - sum(r.s_k for r in tr.records))
    res.append(("budget_accounting", float(budget_err), "t equals the sum of s_k"))
    move = max(r.prox_move_max for r in tr.records) - (fx.alpha * fx.p.G_h + 1e-12)
    res.append(("prox_displacement", move, "||x_i - q_hat_i|| <= alpha G_h"))
    again = run_multistep_accelerated(fx.p, fx.net, RunConfig(iterations=50, diagnostics=True, seed=2))
    same = all(a.f_value == b.f_value and a.sum_q == b.sum_q for a, b in zip(tr.records, again.records))
    res.append(("determinism", 0.0 if same else 1.0, "repeat run, bitwise"))
    x0d = float(np.linalg.norm(fx.p.x_star))
    ce = run_central_exact(fx.p, RunConfig(algorithm="central_exact", iterations=100))
    b = prop2_bound(ce, fx.p.L, x0d)
    res.append(("exact_accelerated_bound", float(np.max(b.margins())), "gap <= 2L||x0-x*||^2/(n+1)^2"))
    return res


def _diag_checks(rng, fx):
    res = []
    recs = fx.trace.records
    m5 = max(max(r.e_norm - r.e_bound, r.eps - r.eps_bound) for r in recs) - 1e-10
    res.append(("inexact_reformulation_bounds", m5, "e and eps against their estimates"))
    stage = max(r.dev_q_max - r.stage_dev_bound for r in recs)
    res.append(("consensus_deviation_bound", stage, "||q_hat_i - q_bar|| <= Gamma gamma^s sum||q_j||"))
    rep = recursion_check(fx.trace, fx.trace.meta["constants"])
    res.append(("recursion_margins", max(rep.worst(n) for n in "abc") - rep.tol, "three recursive bounds"))
    const = polynomial_constants(fx.p, fx.net, fx.alpha, fx.trace)
    poly = max(r.sum_q - float(const.poly(r.k)) for r in recs if r.k >= 2)
    res.append(("quadratic_bound_on_q", poly, "fitted fallback" if const.fitted else "closed-form constants"))
    s = summability_report(fx.trace)
    res.append(("summability", max(s.ratio_e, s.ratio_eps) - s.threshold, "last-quarter share"))
    p6 = synth_problem(5, 100, 10, "logistic", lam=0.01, seed=0)
    solve_optimum(p6)
    tr6 = run_multistep_accelerated(p6, generate_pool(5, 5, 0.6, seed=1), RunConfig(budget=2000, seed=2))
    fit = rate_fit(tr6)
    res.append(("rate_slope", fit.slope + 0.9, f"slope {fit.slope:.3f} over the tail half"))
    x0d = float(np.linalg.norm(fx.p.x_star))
    worst = -math.inf
    for spec in (ErrorSpec(0.1, 0.9), ErrorSpec(eps_scale=0.01, eps_rate=0.8), ErrorSpec(0.1, 0.9, 0.01, 0.8)):
        tr = run_central_inexact(fx.p, RunConfig(algorithm="central_inexact", iterations=100, seed=3), spec)
        worst = max(worst, float(np.max(prop2_bound(tr, fx.p.L, x0d).margins())))
    res.append(("inexact_accelerated_bound", worst, "three geometric error specs"))
    return res


def run_checks(scope: str = "all", seed: int = 0):
    """Run the battery restricted to ``scope``; returns a list of ``CheckResult``."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {', '.join(SCOPES)}")
    rng = np.random.default_rng(seed)
    groups = [("proxcore", _prox_checks), ("netmodel", _net_checks), ("objectives", _obj_checks)]
    out = []
    for name, fn in groups:
        if scope in ("all", name):
            t0 = time.perf_counter()
            for cname, margin, detail in fn(rng):
                out.append(CheckResult(name, cname, float(margin), detail))
            out[-1].seconds = time.perf_counter() - t0
    if scope in ("all", "solvers", "diagnostics"):
        fx = _Fixture()
        for name, fn in (("solvers", _solver_checks), ("diagnostics", _diag_checks)):
            if scope in ("all", name):
                for cname, margin, detail in fn(rng, fx):
                    out.append(CheckResult(name, cname, float(margin), detail))
    return out
