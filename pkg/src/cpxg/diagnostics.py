"""Error sequences, their bounds and convergence certificates.

The distributed method can be read as an inexact centralized accelerated
proximal-gradient method.  This module evaluates the two error sequences
of that reading exactly, the estimates the analysis gives for them, the
recursive bounds on the iterates, the quadratic bound on ``sum_i ||q_i||``
and a few trace summaries (summability, rate fits, the inexact bound).

Contraction constants are handled in log space: for realistic pools
``Gamma`` overflows and ``gamma`` rounds to one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import _accel
from .network import NetworkPool
from .objectives import DistributedProblem
from .prox import ProxSpec, prox, prox_gap

NAN = math.nan

# relative tolerance of the partial sums and the term cap
POLY_GEO_RTOL = 1e-14
POLY_GEO_MAX_TERMS = 50_000_000

SUMMABLE_RATIO = 1e-6


@dataclass
class IterationRecord:
    """Per-iteration measurements; fields a run cannot supply stay NaN."""

    k: int
    t: int
    s_k: int
    f_gap: float = NAN
    dev_y: float = NAN
    dev_q: float = NAN
    e_norm: float = NAN
    e_bound: float = NAN
    eps: float = NAN
    eps_bound: float = NAN
    sum_q: float = NAN
    poly_bound: float = NAN
    prop6a: float = NAN
    prop6b: float = NAN
    prop6c: float = NAN
    # not part of the CSV schema
    f_value: float = NAN
    dev_y_max: float = NAN
    dev_q_max: float = NAN
    dx_sum: float = NAN
    prox_move_max: float = NAN
    stage_dev_bound: float = NAN


CSV_FIELDS = ("k", "t", "s_k", "f_gap", "dev_y", "dev_q", "e_norm", "e_bound", "eps", "eps_bound",
              "sum_q", "poly_bound", "prop6a", "prop6b", "prop6c")
RECORD_FIELDS = tuple(f.name for f in fields(IterationRecord))


# ---------------------------------------------------------------------------
# error sequences


def _block(states, d=None, name="states"):
    arr = np.asarray(states, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be an (m, d) array")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"{name} have dimension {arr.shape[1]}, problem has {d}")
    return arr


def mean_deviation(states) -> float:
    """``(1/m) sum_i ||v_i - v_bar||``."""
    V = _block(states)
    return float(np.linalg.norm(V - V.mean(axis=0), axis=1).mean())


def exact_error_e(p: DistributedProblem, y_states) -> np.ndarray:
    """Gradient error ``(1/m) sum_i [grad g_i(y_i) - grad g_i(y_bar)]``."""
    Y = _block(y_states, p.d, "y states")
    if Y.shape[0] != p.m:
        raise ValueError(f"got {Y.shape[0]} agent states for {p.m} agents")
    y_bar = Y.mean(axis=0)
    acc = np.zeros(p.d)
    for comp, y in zip(p.components, Y):
        acc += comp.gradient(y) - comp.gradient(y_bar)
    return acc / p.m


def exact_error_eps(h: ProxSpec, alpha: float, q_hat_states) -> float:
    """Prox suboptimality of the averaged prox outputs at the averaged centre.

    With ``x_bar = mean_i prox(q_hat_i)`` and ``q_bar = mean_i q_hat_i``
    this is ``prox_gap(h, alpha, q_bar, x_bar)``, the realized value.
    """
    Q = _block(q_hat_states, name="q_hat states")
    x_bar = prox(h, alpha, Q).mean(axis=0)
    return prox_gap(h, alpha, Q.mean(axis=0), x_bar)


def error_bounds(p: DistributedProblem, h: ProxSpec, alpha: float, y_prev_states, q_hat_states):
    """Right-hand sides for the two error sequences.

    ``e_bound = (L/m) sum ||y_i - y_bar||`` over the previous extrapolated
    points and ``eps_bound = 2 G_h D + D^2 / (2 alpha)`` with
    ``D = (1/m) sum ||q_hat_i - q_bar||``.
    """
    dy = mean_deviation(y_prev_states)
    dq = mean_deviation(q_hat_states)
    g_h = h.weight * math.sqrt(p.d)
    return p.L * dy, 2.0 * g_h * dq + dq * dq / (2.0 * alpha)


# ---------------------------------------------------------------------------
# polynomial-geometric sums


def _closed_form_sum(order: int, gamma: float) -> float:
    g = gamma
    if order == 0:
        return 1.0 / (1.0 - g)
    if order == 1:
        return g / (1.0 - g) ** 2
    if order == 2:
        return g * (1.0 + g) / (1.0 - g) ** 3
    return g * (1.0 + 4.0 * g + g * g) / (1.0 - g) ** 4


def poly_geo_sum(order: int, gamma: float) -> float:
    """``S_N = sum_{k>=0} k^N gamma^k`` by partial summation.

    Summation stops once an analytic bound on the remaining tail drops
    below ``1e-14`` of the running sum.

    Raises
    ------
    ValueError
        ``gamma`` outside ``(0, 1)`` or ``order`` not in ``0..3``.
    RuntimeError
        The term cap was reached (``gamma`` too close to one).
    """
    if order not in (0, 1, 2, 3):
        raise ValueError(f"order must be 0, 1, 2 or 3, got {order!r}")
    if not (0.0 < gamma < 1.0):
        raise ValueError(f"gamma must lie in (0, 1), got {gamma!r}")
    total, n = _accel.poly_geo_partial(order, float(gamma), POLY_GEO_RTOL, POLY_GEO_MAX_TERMS)
    if n < 0:
        raise RuntimeError(f"partial sums did not settle within {POLY_GEO_MAX_TERMS} terms for gamma={gamma!r}")
    return float(total)


def _log_sum_ratios(log_gamma: float):
    """``(S0/S1, S2/S1, log S1)`` from ``log gamma``, stable for gamma near 1."""
    delta = -math.expm1(log_gamma)  # 1 - gamma
    gamma = math.exp(log_gamma)
    log_s1 = log_gamma - 2.0 * math.log(delta)
    return delta / gamma, (1.0 + gamma) / delta, log_s1


# ---------------------------------------------------------------------------
# certificate constants


@dataclass(frozen=True)
class CertConstants:
    """Inputs of the recursive bounds and the quadratic bound on ``sum ||q_i||``.

    ``C_q``, ``C_q1``, ``C_q2`` are the constant, linear and quadratic
    coefficients.  ``fitted`` marks a least-squares fallback, which is an
    empirical envelope and not a certificate.  ``C_q2_formula`` is always
    the closed-form ``alpha m (G_g + G_h) / 2``.
    """

    m: int
    alpha: float
    G_g: float
    G_h: float
    log_Gamma: float
    log_gamma: float
    C_q: float = NAN
    C_q1: float = NAN
    C_q2: float = NAN
    C_q2_formula: float = NAN
    fitted: bool = False
    note: str = ""

    def bound(self, steps):
        """``Gamma * gamma**steps`` evaluated in log space."""
        s = np.asarray(steps, dtype=np.float64)
        with np.errstate(invalid="ignore", over="ignore"):
            if self.log_Gamma == -math.inf:
                out = np.zeros_like(s)
            else:
                out = np.exp(self.log_Gamma + s * self.log_gamma)
        return out if out.ndim else float(out)

    def poly(self, k):
        k = np.asarray(k, dtype=np.float64)
        return self.C_q + self.C_q1 * k + self.C_q2 * k * k

    def with_gamma(self, log_Gamma: float | None = None, log_gamma: float | None = None):
        """Copy with replaced contraction constants (for mutation checks)."""
        return CertConstants(self.m, self.alpha, self.G_g, self.G_h,
                             self.log_Gamma if log_Gamma is None else log_Gamma,
                             self.log_gamma if log_gamma is None else log_gamma,
                             self.C_q, self.C_q1, self.C_q2, self.C_q2_formula, self.fitted, self.note)


def _records(trace):
    return trace.records if hasattr(trace, "records") else list(trace)


def _fit_envelope(ks, qs, margin=1.1):
    from scipy.optimize import nnls

    M = np.column_stack([np.ones_like(ks), ks, ks * ks])
    coef, _ = nnls(M, qs)
    return tuple(float(c) * margin for c in coef)


def polynomial_constants(p: DistributedProblem, net: NetworkPool, alpha: float, trace,
                         schedule: str = "linear") -> CertConstants:
    """Constants of the quadratic bound ``sum_i ||q_i^k|| <= C_q + C_q' k + C_q'' k^2``.

    ``C_q`` is the value at iteration 2, ``C_q'' = alpha m (G_g + G_h) / 2``
    and ``C_q' = (D C_q S0 + (D S2 - 1) C_q'') / (D S1 - 1)`` with
    ``D = 2 m Gamma`` and ``S_N`` the polynomial-geometric sums at gamma.
    The ratio is evaluated after dividing through by ``D S1`` since both
    overflow for real pools.

    When the denominator is not positive, or the schedule is not linear
    (the sums then change), the three coefficients are instead fitted to
    the recorded sequence by nonnegative least squares and inflated by
    10%; the result is flagged ``fitted``.

    Raises
    ------
    ValueError
        ``p`` has no global gradient bound (least-squares losses), or the
        trace lacks iteration 2.
    """
    if not p.G_g_global:
        raise ValueError("the gradient bound G_g is only global for logistic losses; "
                         "use a logistic problem for polynomial certificates")
    recs = _records(trace)
    by_k = {r.k: r for r in recs}
    if 2 not in by_k or not math.isfinite(by_k[2].sum_q):
        raise ValueError("trace must contain iteration 2 with sum_q recorded")
    m = p.m
    c2 = 0.5 * alpha * m * (p.G_g + p.G_h)
    cq = by_k[2].sum_q
    base = dict(m=m, alpha=alpha, G_g=p.G_g, G_h=p.G_h, log_Gamma=net.log_Gamma, log_gamma=net.log_gamma,
                C_q2_formula=c2)

    reason = ""
    if schedule != "linear":
        reason = f"schedule {schedule!r}: closed-form sums assume s_k = k"
    elif net.log_Gamma == -math.inf or not net.log_gamma < 0:
        reason = "no contraction constants (single agent or gamma >= 1)"
    else:
        r01, r21, log_s1 = _log_sum_ratios(net.log_gamma)
        log_ds1 = math.log(2 * m) + net.log_Gamma + log_s1
        if log_ds1 <= 0:
            reason = "2 m Gamma S1 <= 1"
        else:
            inv = math.exp(-log_ds1)
            c1 = (cq * r01 + (r21 - inv) * c2) / (1.0 - inv)
            return CertConstants(C_q=cq, C_q1=c1, C_q2=c2, fitted=False, **base)

    ks = np.array([r.k for r in recs if r.k >= 2], dtype=np.float64)
    qs = np.array([r.sum_q for r in recs if r.k >= 2], dtype=np.float64)
    a, b, c = _fit_envelope(ks, qs)
    return CertConstants(C_q=a, C_q1=b, C_q2=c, fitted=True, note=reason, **base)


def cert_constants(p: DistributedProblem, net: NetworkPool, alpha: float) -> CertConstants:
    """Contraction and gradient constants only, without the polynomial part."""
    return CertConstants(p.m, alpha, p.G_g, p.G_h, net.log_Gamma, net.log_gamma,
                         C_q2_formula=0.5 * alpha * p.m * (p.G_g + p.G_h))


# ---------------------------------------------------------------------------
# recursive bounds


@dataclass
class RecursionReport:
    k: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    tol: float

    def worst(self, name) -> float:
        v = getattr(self, name)
        v = v[np.isfinite(v) | (v == -np.inf)]
        return float(np.max(v)) if v.size else -math.inf

    @property
    def passed(self) -> bool:
        return all(self.worst(n) <= self.tol for n in ("a", "b", "c"))

    def failures(self) -> list:
        return [n for n in ("a", "b", "c") if self.worst(n) > self.tol]


_REQUIRED = ("sum_q", "dx_sum", "dev_y_max")


def recursion_check(trace, constants: CertConstants, tol: float = 1e-9) -> RecursionReport:
    """Margins (left minus right) of the three recursive bounds.

    With ``Q_k = sum_i ||q_i^k||`` and ``X_k = sum_i ||x_i^k - x_i^(k-1)||``:

    (a) ``Q_(k+1) <= Q_k + alpha m (G_g + G_h) + X_k`` for ``k >= 2``,
        reported at the record of iteration ``k + 1``;
    (b) ``X_k <= 2 m Gamma sum_(l<k) gamma^(s_l) Q_l + (k - 1) alpha m (G_g + G_h)``;
    (c) ``max_i ||y_i^k - y_bar^k|| <= 4 Gamma gamma^(s_k) Q_k + 2 Gamma gamma^(s_(k-1)) Q_(k-1)``.

    A margin ``<= 0`` means the bound holds; entries without a defined
    instance are NaN.
    """
    recs = _records(trace)
    for name in _REQUIRED:
        if not recs or not all(math.isfinite(getattr(r, name)) for r in recs):
            raise ValueError(f"trace lacks recorded {name!r}; run with diagnostics enabled")
    n = len(recs)
    ks = np.array([r.k for r in recs])
    if not np.array_equal(ks, np.arange(1, n + 1)):
        raise ValueError("trace records must be consecutive from iteration 1")
    Q = np.array([r.sum_q for r in recs])
    X = np.array([r.dx_sum for r in recs])
    dev = np.array([r.dev_y_max for r in recs])
    s = np.array([r.s_k for r in recs], dtype=np.float64)
    c = constants
    step = c.alpha * c.m * (c.G_g + c.G_h)
    G = c.bound(s)  # Gamma gamma^(s_k) per iteration
    a = np.full(n, NAN)
    b = np.full(n, NAN)
    cc = np.full(n, NAN)
    with np.errstate(over="ignore", invalid="ignore"):
        GQ = G * Q
        cum = np.cumsum(GQ)  # sum_{l<=k}
        for i in range(n):
            k = i + 1
            if k >= 3:
                a[i] = Q[i] - (Q[i - 1] + step + X[i - 1])
            if k >= 2:
                b[i] = X[i] - (2.0 * c.m * cum[i - 1] + (k - 1) * step)
                cc[i] = dev[i] - (4.0 * GQ[i] + 2.0 * GQ[i - 1])
    return RecursionReport(ks, a, b, cc, tol)


def attach_certificates(trace, p: DistributedProblem, net: NetworkPool, alpha: float) -> None:
    """Fill ``poly_bound`` and the three recursion margins of a diagnostics trace in place."""
    recs = trace.records
    schedule = trace.config.get("schedule", "linear") if isinstance(trace.config, dict) else "linear"
    try:
        const = polynomial_constants(p, net, alpha, trace, schedule) if len(recs) >= 2 else None
    except ValueError as exc:
        const = None
        trace.meta["poly_note"] = str(exc)
    if const is None:
        const = cert_constants(p, net, alpha)
    else:
        trace.meta["poly_fitted"] = const.fitted
        for r in recs:
            r.poly_bound = float(const.poly(r.k)) if r.k >= 2 else NAN
    rep = recursion_check(trace, const)
    for i, r in enumerate(recs):
        r.prop6a, r.prop6b, r.prop6c = float(rep.a[i]), float(rep.b[i]), float(rep.c[i])
    trace.meta["constants"] = const


# ---------------------------------------------------------------------------
# trace summaries


@dataclass
class SummabilityReport:
    k: np.ndarray
    cum_e: np.ndarray  # partial sums of k ||e^k||
    cum_eps: np.ndarray  # partial sums of k sqrt(eps^k)
    ratio_e: float
    ratio_eps: float
    threshold: float = SUMMABLE_RATIO
    flags: list = field(default_factory=list)

    @property
    def summable(self) -> bool:
        return not self.flags


def _tail_ratio(terms):
    total = float(np.sum(terms))
    if total == 0.0:
        return 0.0
    q = len(terms) - len(terms) // 4
    return float(np.sum(terms[q:])) / total


def summability_report(trace, threshold: float = SUMMABLE_RATIO) -> SummabilityReport:
    """Partial sums of ``k ||e^k||`` and ``k sqrt(eps^k)`` and their last-quarter share.

    A share above ``threshold`` is flagged as a symptom of
    non-summability; a geometric tail drives it to zero.
    """
    recs = _records(trace)
    k = np.array([r.k for r in recs], dtype=np.float64)
    e = np.array([r.e_norm for r in recs], dtype=np.float64)
    eps = np.array([r.eps for r in recs], dtype=np.float64)
    te = k * np.nan_to_num(e)
    tp = k * np.sqrt(np.maximum(np.nan_to_num(eps), 0.0))
    rep = SummabilityReport(k, np.cumsum(te), np.cumsum(tp), _tail_ratio(te), _tail_ratio(tp), threshold)
    if rep.ratio_e > threshold:
        rep.flags.append(f"k*||e||: last-quarter share {rep.ratio_e:.3e} > {threshold:g}")
    if rep.ratio_eps > threshold:
        rep.flags.append(f"k*sqrt(eps): last-quarter share {rep.ratio_eps:.3e} > {threshold:g}")
    return rep


@dataclass
class RateFit:
    slope: float
    intercept: float
    n_points: int
    floor_hit: bool

    def predict(self, t):
        return math.exp(self.intercept) * np.asarray(t, dtype=np.float64) ** self.slope


def rate_fit(trace, window=0.5, x: str = "t") -> RateFit:
    """Least-squares slope of ``log f_gap`` against ``log t``.

    ``window`` is either the tail fraction of the ``t`` range (0.5 keeps
    records with ``t >= t_last / 2``) or an inclusive ``(t_lo, t_hi)``
    pair.  If the window contains non-positive gaps the fit uses the
    segment before the first one and ``floor_hit`` is set.
    """
    recs = _records(trace)
    ts = np.array([getattr(r, x) for r in recs], dtype=np.float64)
    gaps = np.array([r.f_gap for r in recs], dtype=np.float64)
    if isinstance(window, tuple):
        lo, hi = window
    else:
        if not 0 < window <= 1:
            raise ValueError("window fraction must lie in (0, 1]")
        hi = ts[-1]
        lo = (1.0 - window) * hi
    sel = (ts >= lo) & (ts <= hi)
    tw, gw = ts[sel], gaps[sel]
    floor = False
    bad = ~(gw > 0)
    if bad.any():
        floor = True
        first = int(np.argmax(bad))
        tw, gw = tw[:first], gw[:first]
    if len(tw) < 2:
        raise ValueError("fewer than two positive gaps in the fit window")
    slope, icpt = np.polyfit(np.log(tw), np.log(gw), 1)
    return RateFit(float(slope), float(icpt), int(len(tw)), floor)


@dataclass
class InexactBound:
    n: np.ndarray
    A: np.ndarray
    B: np.ndarray
    bound: np.ndarray
    gap: np.ndarray

    def margins(self):
        return self.gap - self.bound

    @property
    def holds(self) -> bool:
        return bool(np.all(self.gap <= self.bound))


def prop2_bound(trace, L: float, x0_dist: float) -> InexactBound:
    """Bound on the accelerated inexact method along a recorded run.

    ``A_n = sum_(k<=n) k (||e^k|| / L + sqrt(2 eps^k / L))``,
    ``B_n = sum_(k<=n) k^2 eps^k / L`` and
    ``bound_n = 2 L (||x0 - x*|| + 2 A_n + sqrt(2 B_n))^2 / (n + 1)^2``.
    """
    if getattr(trace, "f_star", None) is None:
        raise ValueError("trace has no reference optimum f*")
    if x0_dist is None or not math.isfinite(x0_dist):
        raise ValueError("distance from the start to x* is required")
    recs = _records(trace)
    k = np.array([r.k for r in recs], dtype=np.float64)
    e = np.nan_to_num(np.array([r.e_norm for r in recs]))
    eps = np.maximum(np.nan_to_num(np.array([r.eps for r in recs])), 0.0)
    A = np.cumsum(k * (e / L + np.sqrt(2.0 * eps / L)))
    B = np.cumsum(k * k * eps / L)
    bound = 2.0 * L * (x0_dist + 2.0 * A + np.sqrt(2.0 * B)) ** 2 / (k + 1.0) ** 2
    gap = np.array([r.f_gap for r in recs], dtype=np.float64)
    return InexactBound(k.astype(int), A, B, bound, gap)


def inverse_rate_constant(trace, window=0.5, tol=0.05):
    """Check ``f_gap(t) <= C / t`` with ``C`` fixed at the first point of the tail window.

    Returns ``(C, worst_excess)`` where ``worst_excess`` is the largest
    ``f_gap(t) t / C - 1`` after that point; ``<= tol`` passes.
    """
    recs = _records(trace)
    ts = np.array([r.t for r in recs], dtype=np.float64)
    gaps = np.array([r.f_gap for r in recs], dtype=np.float64)
    lo = (1.0 - window) * ts[-1]
    i0 = int(np.argmax(ts >= lo))
    C = gaps[i0] * ts[i0]
    excess = gaps[i0:] * ts[i0:] / C - 1.0
    return float(C), float(np.max(excess))
