"""Iterative methods.

Distributed methods keep the agent estimates as an ``(m, d)`` block with
one row per agent; per-agent work is combined in agent-index order so
runs are bit-reproducible.

``multistep_accelerated``  gradient step, s_k consensus rounds on q, prox, momentum
``basic_subgradient``      subgradient step, one consensus round
``basic_proxgrad``         prox-gradient step, one consensus round
``accelerated_singlestep`` prox-gradient step, momentum, one round on y
``multistep_after_prox``   prox-gradient step, momentum, s_k rounds on y
``central_exact``          accelerated prox-gradient on the averaged loss
``central_inexact``        same with injected gradient / prox errors
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .diagnostics import IterationRecord, attach_certificates, error_bounds, exact_error_e
from .network import MatrixSchedule, NetworkPool, empirical_gamma, mix
from .objectives import DistributedProblem
from .prox import min_norm_subgradient, prox, prox_gap

log = logging.getLogger(__name__)

DISTRIBUTED = (
    "multistep_accelerated",
    "basic_subgradient",
    "basic_proxgrad",
    "accelerated_singlestep",
    "multistep_after_prox",
)
CENTRAL = ("central_exact", "central_inexact")
ALGORITHMS = DISTRIBUTED + CENTRAL
SCHEDULES = ("linear", "logarithmic", "constant")

# refuse single consensus stages longer than this
MAX_STAGE_STEPS = 50_000_000


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# scalar helpers


def momentum_coefficient(k: int) -> float:
    """``(k - 1) / (k + 2)``."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    return (k - 1) / (k + 2)


def consensus_schedule(kind: str, k: int, gamma: float | None = None, *,
                       const: int | None = None, log_gamma: float | None = None) -> int:
    """Number of consensus rounds ``s_k`` at iteration ``k``.

    ``linear`` gives ``k``; ``logarithmic`` gives
    ``ceil(4 ln(k + 1) / -ln(gamma))``; ``constant`` gives ``const``.
    ``log_gamma`` may be passed instead of ``gamma`` when ``gamma`` is
    too close to one to be represented.
    """
    if k < 1:
        raise ValueError("iteration index starts at 1")
    if kind == "linear":
        return k
    if kind == "constant":
        if const is None or const < 1:
            raise ValueError("constant schedule needs const >= 1")
        return int(const)
    if kind == "logarithmic":
        if log_gamma is None:
            if gamma is None:
                raise ValueError("logarithmic schedule needs the contraction rate gamma")
            if not 0.0 < gamma < 1.0:
                raise ValueError(f"gamma must lie in (0, 1), got {gamma!r}")
            log_gamma = math.log(gamma)
        if not log_gamma < 0:
            raise ValueError("logarithmic schedule needs gamma < 1")
        v = 4.0 * math.log(k + 1) / -log_gamma
        # tolerate last-bit noise at exact integers (e.g. gamma = 1/2)
        return max(1, math.ceil(v * (1 - 1e-12)))
    raise ValueError(f"unknown schedule {kind!r}")


def iterations_for_budget(t: int) -> int:
    """Greatest ``n`` with ``n (n + 1) / 2 <= t`` (linear schedule)."""
    if t < 1:
        raise ValueError("communication budget must be >= 1")
    return (math.isqrt(1 + 8 * t) - 1) // 2


# ---------------------------------------------------------------------------
# configuration / trace


@dataclass
class RunConfig:
    """Settings for one run.

    ``budget`` caps total communication steps; ``iterations`` caps the
    iteration count.  At least one must be set; with both, whichever is
    hit first stops the run.  ``alpha=None`` means ``1 / L``.
    """

    algorithm: str = "multistep_accelerated"
    alpha: float | None = None
    schedule: str = "linear"
    schedule_const: int = 1
    budget: int | None = None
    iterations: int | None = None
    seed: int = 0
    diagnostics: bool = False
    schedule_mode: str = "permutation"
    gamma_source: str = "theoretical"
    keep_iterates: bool = False
    certify: bool = False

    def validate(self, L: float | None = None):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm: unknown method {self.algorithm!r}")
        if self.alpha is not None and not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha: step size must be positive, got {self.alpha!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule: unknown schedule {self.schedule!r}")
        if self.schedule == "constant" and self.schedule_const < 1:
            raise ConfigError("schedule_const: must be >= 1")
        if self.budget is None and self.iterations is None:
            raise ConfigError("budget: either a communication budget or an iteration count is required")
        if self.budget is not None and self.budget < 1:
            raise ConfigError(f"budget: must be >= 1, got {self.budget}")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations: must be >= 1, got {self.iterations}")
        if self.gamma_source not in ("theoretical", "empirical"):
            raise ConfigError(f"gamma_source: unknown value {self.gamma_source!r}")
        if self.certify and L is not None and self.alpha is not None and self.alpha > 1.0 / L * (1 + 1e-12):
            raise ConfigError(f"alpha: rate certification requires alpha <= 1/L = {1.0 / L:.6g}")


@dataclass
class RunTrace:
    records: list
    config: dict
    problem: dict
    f_star: float | None
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)
    iterates: np.ndarray | None = None  # (n, d) averaged iterates when kept
    agent_history: dict | None = None

    @property
    def total_steps(self) -> int:
        return self.records[-1].t if self.records else 0

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)


@dataclass(frozen=True)
class ErrorSpec:
    """Geometric error sequences ``||e_k|| = e_scale * e_rate**k``, ``eps_k = eps_scale * eps_rate**k``."""

    e_scale: float = 0.0
    e_rate: float = 0.0
    eps_scale: float = 0.0
    eps_rate: float = 0.0

    def e_norm(self, k):
        return self.e_scale * self.e_rate**k if self.e_scale else 0.0

    def eps(self, k):
        return self.eps_scale * self.eps_rate**k if self.eps_scale else 0.0


# ---------------------------------------------------------------------------
# shared pieces


def _step(cfg: RunConfig, p: DistributedProblem) -> float:
    return cfg.alpha if cfg.alpha is not None else 1.0 / p.L


def _initial(p: DistributedProblem, y0):
    if y0 is None:
        return np.zeros(p.d)
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape != (p.d,):
        raise ValueError(f"initial point must have dimension {p.d}")
    return y0.copy()


def _gap(p, x):
    fx = p.objective(x)
    return fx, (fx - p.f_star if p.f_star is not None else math.nan)


def _mean_dev(V):
    c = V.mean(axis=0)
    n = np.linalg.norm(V - c, axis=1)
    return float(n.mean()), float(n.max())


def _pick_gamma(p, pool, cfg, rng_seed):
    if cfg.gamma_source == "empirical":
        est = empirical_gamma(pool, horizon=200, trials=10, seed=rng_seed)
        if not est.contracting:
            raise ConfigError("gamma_source: empirical estimate shows no contraction")
        return math.log(max(est.rate, 1e-300)), True
    return pool.log_gamma, False


class _Stages:
    """Per-iteration consensus stage lengths and the budget rule."""

    def __init__(self, cfg, log_gamma):
        self.cfg = cfg
        self.log_gamma = log_gamma

    def s(self, k):
        c = self.cfg
        if c.schedule == "logarithmic":
            return consensus_schedule("logarithmic", k, log_gamma=self.log_gamma)
        return consensus_schedule(c.schedule, k, const=c.schedule_const)

    def allows(self, k, t, s):
        c = self.cfg
        if c.iterations is not None and k > c.iterations:
            return False
        if c.budget is not None and t + s > c.budget:
            return False
        if s > MAX_STAGE_STEPS:
            raise RuntimeError(f"iteration {k} asks for {s} consensus rounds (cap {MAX_STAGE_STEPS})")
        return True


def _finish(records, cfg, p, t0, meta, iterates, history=None):
    return RunTrace(records, asdict(cfg), p.metadata(), p.f_star, time.perf_counter() - t0, meta,
                    np.array(iterates) if iterates is not None else None, history)


# ---------------------------------------------------------------------------
# main method


def run_multistep_accelerated(p: DistributedProblem, net: NetworkPool, cfg: RunConfig, y0=None) -> RunTrace:
    """Distributed proximal gradient with a multi-step consensus stage before the prox.

    At iteration k every agent computes ``q_i = y_i - alpha grad g_i(y_i)``,
    the q block is mixed through ``s_k`` consensus rounds, each agent takes
    ``x_i = prox(q_hat_i)`` and then ``y_i = x_i + (k-1)/(k+2) (x_i - x_i_prev)``.
    """
    cfg.validate(p.L)
    if net.m != p.m:
        raise ValueError(f"pool has {net.m} agents, problem has {p.m}")
    alpha = _step(cfg, p)
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    log_gamma, heuristic = (_pick_gamma(p, net, cfg, cfg.seed + 7919)
                            if cfg.schedule == "logarithmic" else (net.log_gamma, False))
    stages = _Stages(cfg, log_gamma)
    sched = MatrixSchedule(net.size, rng, cfg.schedule_mode)
    h, m = p.h, p.m

    Y = np.tile(_initial(p, y0), (m, 1))
    X_prev = Y.copy()  # x^(0) := y^(0)
    t = 0
    k = 1
    records = []
    iterates = [] if cfg.keep_iterates else None
    history = {"stage_idx": []} if cfg.diagnostics else None
    diag = cfg.diagnostics

    while True:
        s = stages.s(k)
        if not stages.allows(k, t, s):
            break
        G = p.agent_gradients(Y)
        Q = np.ascontiguousarray(Y - alpha * G)
        idx = sched.draw(s)
        Qhat = mix(Q, net, idx)
        X = prox(h, alpha, Qhat)
        beta = momentum_coefficient(k)
        Y_new = X + beta * (X - X_prev)
        t += s
        x_bar = X.mean(axis=0)
        f_val, f_gap = _gap(p, x_bar)
        rec = IterationRecord(k=k, t=t, s_k=s, f_gap=f_gap, f_value=f_val)
        if diag:
            e = exact_error_e(p, Y)
            dev_q, dev_q_max = _mean_dev(Qhat)
            dev_y, dev_y_max = _mean_dev(Y_new)
            rec.dev_y = dev_y
            rec.dev_y_max = dev_y_max
            rec.dev_q = dev_q
            rec.dev_q_max = dev_q_max
            rec.e_norm = float(np.linalg.norm(e))
            rec.e_bound, rec.eps_bound = error_bounds(p, h, alpha, Y, Qhat)
            rec.eps = prox_gap(h, alpha, Qhat.mean(axis=0), x_bar)
            rec.sum_q = float(np.linalg.norm(Q, axis=1).sum())
            rec.dx_sum = float(np.linalg.norm(X - X_prev, axis=1).sum())
            rec.prox_move_max = float(np.linalg.norm(X - Qhat, axis=1).max())
            rec.stage_dev_bound = float(net.bound(s)) * rec.sum_q
            history["stage_idx"].append(idx)
        records.append(rec)
        if iterates is not None:
            iterates.append(x_bar)
        X_prev, Y = X, Y_new
        k += 1

    if not records:
        raise ConfigError(f"budget: {cfg.budget} is smaller than the first stage length {stages.s(1)}")
    meta = {"alpha": alpha, "log_gamma_schedule": log_gamma, "gamma_heuristic": heuristic,
            "backend_steps": t}
    trace = _finish(records, cfg, p, t0, meta, iterates, history)
    if diag:
        attach_certificates(trace, p, net, alpha)
    return trace


# ---------------------------------------------------------------------------
# baselines


def _run_baseline(p, net, cfg, y0, variant):
    cfg.validate(p.L)
    if net.m != p.m:
        raise ValueError(f"pool has {net.m} agents, problem has {p.m}")
    alpha = _step(cfg, p)
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    sched = MatrixSchedule(net.size, rng, cfg.schedule_mode)
    multi = variant == "after_prox"
    if multi and cfg.schedule == "logarithmic":
        log_gamma, _ = _pick_gamma(p, net, cfg, cfg.seed + 7919)
    else:
        log_gamma = net.log_gamma
    stages = _Stages(cfg, log_gamma)
    h, m = p.h, p.m
    W = np.tile(_initial(p, y0), (m, 1))
    X_prev = W.copy()
    t, k = 0, 1
    records, iterates = [], ([] if cfg.keep_iterates else None)
    while True:
        s = stages.s(k) if multi else 1
        if not stages.allows(k, t, s):
            break
        G = p.agent_gradients(W)
        if variant == "subgradient":
            Z = np.stack([min_norm_subgradient(h, w) for w in W])
            X = W - alpha * (G + Z)
            nxt = X
        else:
            X = prox(h, alpha, W - alpha * G)
            if variant == "proxgrad":
                nxt = X
            else:
                nxt = X + momentum_coefficient(k) * (X - X_prev)
        W = mix(np.ascontiguousarray(nxt), net, sched.draw(s))
        t += s
        x_bar = X.mean(axis=0)
        f_val, f_gap = _gap(p, x_bar)
        rec = IterationRecord(k=k, t=t, s_k=s, f_gap=f_gap, f_value=f_val)
        rec.dev_y, rec.dev_y_max = _mean_dev(W)
        records.append(rec)
        if iterates is not None:
            iterates.append(x_bar)
        X_prev = X
        k += 1
    if not records:
        raise ConfigError(f"budget: {cfg.budget} is smaller than the first stage length")
    return _finish(records, cfg, p, t0, {"alpha": alpha}, iterates)


def run_basic_subgradient(p, net, cfg, y0=None) -> RunTrace:
    """``x_i = w_i - alpha (grad g_i(w_i) + z_h(w_i))``, then one consensus round.

    ``z_h`` is the minimum-norm subgradient (0 at kinks of the l1 norm).
    """
    return _run_baseline(p, net, cfg, y0, "subgradient")


def run_basic_proxgrad(p, net, cfg, y0=None) -> RunTrace:
    """``x_i = prox(w_i - alpha grad g_i(w_i))``, then one consensus round."""
    return _run_baseline(p, net, cfg, y0, "proxgrad")


def run_accelerated_singlestep(p, net, cfg, y0=None) -> RunTrace:
    """Prox-gradient step, momentum, then one consensus round on the extrapolated point."""
    return _run_baseline(p, net, cfg, y0, "accel")


def run_multistep_after_prox(p, net, cfg, y0=None) -> RunTrace:
    """Prox-gradient step, momentum, then ``s_k`` consensus rounds on the extrapolated point."""
    return _run_baseline(p, net, cfg, y0, "after_prox")


# ---------------------------------------------------------------------------
# centralized


def _inexact_prox(h, alpha, center, eps_target, rng, max_bisect=200):
    """A point of the eps-optimal prox set with gap in ``[eps/2, eps]`` when reachable."""
    y = prox(h, alpha, center)
    if eps_target < 1e-14:
        return y, 0.0
    u = rng.standard_normal(y.shape)
    u /= np.linalg.norm(u)

    def gap(tau):
        return prox_gap(h, alpha, center, y + tau * u)

    # quadratic growth gives a first guess; the gap is nondecreasing in tau
    hi = math.sqrt(2.0 * alpha * eps_target)
    lo = 0.0
    for _ in range(200):
        if gap(hi) >= 0.5 * eps_target:
            break
        lo, hi = hi, 2.0 * hi
    best_tau, best_gap = 0.0, 0.0
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        g = gap(mid)
        if g <= eps_target:
            best_tau, best_gap = mid, g
            if g >= 0.5 * eps_target:
                break
            lo = mid
        else:
            hi = mid
    return y + best_tau * u, best_gap


def _central(p, cfg, y0, spec: ErrorSpec | None, stop_tol=None, restart=False, max_iter=None):
    alpha = _step(cfg, p)
    h = p.h
    rng = np.random.default_rng(cfg.seed)
    y = _initial(p, y0)
    x_prev = y.copy()
    n = cfg.iterations if cfg.iterations is not None else (max_iter or cfg.budget)
    t0 = time.perf_counter()
    records, iterates = [], ([] if cfg.keep_iterates else None)
    j = 1  # momentum counter, reset on restart
    gm = math.inf
    for k in range(1, n + 1):
        g = p.smooth_gradient(y)
        e_norm = 0.0
        if spec is not None and spec.e_norm(k) > 0:
            u = rng.standard_normal(p.d)
            e = spec.e_norm(k) * u / np.linalg.norm(u)
            e_norm = float(np.linalg.norm(e))
            g = g + e
        center = y - alpha * g
        if spec is not None and spec.eps(k) > 0:
            x, eps = _inexact_prox(h, alpha, center, spec.eps(k), rng)
        else:
            x, eps = prox(h, alpha, center), 0.0
        gm = float(np.linalg.norm(y - x)) / alpha
        if restart and float((y - x) @ (x - x_prev)) > 0:
            j = 1
        y_new = x + momentum_coefficient(j) * (x - x_prev)
        f_val, f_gap = _gap(p, x)
        rec = IterationRecord(k=k, t=0, s_k=0, f_gap=f_gap, f_value=f_val)
        rec.e_norm, rec.eps = e_norm, eps
        records.append(rec)
        if iterates is not None:
            iterates.append(x)
        x_prev, y = x, y_new
        j += 1
        if stop_tol is not None and gm <= stop_tol:
            break
    return _finish(records, cfg, p, t0, {"alpha": alpha, "grad_map": gm}, iterates), x_prev


def run_central_exact(p: DistributedProblem, cfg: RunConfig, y0=None) -> RunTrace:
    """Accelerated proximal gradient on ``(1/m) sum g_i + h`` without errors."""
    cfg.validate(p.L)
    return _central(p, cfg, y0, None)[0]


def run_central_inexact(p: DistributedProblem, cfg: RunConfig, error_spec: ErrorSpec, y0=None) -> RunTrace:
    """Accelerated proximal gradient with a perturbed gradient and an inexact prox.

    The gradient gets a random direction scaled to ``||e_k||``; the prox
    output is pushed along a random direction until its prox gap lands in
    ``[eps_k / 2, eps_k]`` (bisection).  Realized errors are recorded.
    """
    cfg.validate(p.L)
    return _central(p, cfg, y0, error_spec)[0]


def solve_optimum(p: DistributedProblem, tol: float = 1e-12, max_iter: int = 200_000,
                  restart: bool = True) -> tuple[float, np.ndarray]:
    """Compute ``f*`` and ``x*`` with the centralized accelerated solver.

    Stops once the gradient mapping ``||(y - prox(y - alpha grad g(y))) / alpha||``
    drops to ``tol`` or after ``max_iter`` iterations.  Gradient-based
    momentum restart is on by default.  Results are stored on ``p``.
    """
    cfg = RunConfig(algorithm="central_exact", iterations=max_iter)
    trace, x = _central(p, cfg, None, None, stop_tol=tol, restart=restart)
    f = trace.column("f_value")
    i = int(np.argmin(f))
    best = float(f[i])
    if trace.meta["grad_map"] > tol:
        log.warning("optimum oracle stopped at gradient mapping %.3e > %.1e", trace.meta["grad_map"], tol)
    # the final iterate is the certified one; prefer it unless an earlier value is lower
    fx = p.objective(x)
    if fx <= best:
        best = fx
    p.f_star = best
    p.x_star = x
    return best, x


RUNNERS = {
    "multistep_accelerated": run_multistep_accelerated,
    "basic_subgradient": run_basic_subgradient,
    "basic_proxgrad": run_basic_proxgrad,
    "accelerated_singlestep": run_accelerated_singlestep,
    "multistep_after_prox": run_multistep_after_prox,
}


def run(p: DistributedProblem, net: NetworkPool | None, cfg: RunConfig, error_spec: ErrorSpec | None = None,
        y0=None) -> RunTrace:
    """Dispatch on ``cfg.algorithm``."""
    cfg.validate(p.L)
    if cfg.algorithm == "central_exact":
        return run_central_exact(p, cfg, y0)
    if cfg.algorithm == "central_inexact":
        return run_central_inexact(p, cfg, error_spec or ErrorSpec(), y0)
    if net is None:
        raise ConfigError("pool: distributed methods need a network pool")
    return RUNNERS[cfg.algorithm](p, net, cfg, y0)
