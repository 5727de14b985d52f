"""Time-varying communication network.

Weight-matrix pools, the assumption checks on them, the seeded matrix
scheduler, consensus mixing, transition-matrix products and the
geometric contraction constants.

The contraction constants are kept in log form as well.  For realistic
pools ``eta ** Bbar`` underflows the float64 resolution of ``1 - x``, so
``gamma`` rounds to ``1.0`` and only ``log_gamma`` (computed with
``log1p``) carries the information.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import _accel

log = logging.getLogger(__name__)

MAX_CONNECT_ATTEMPTS = 10_000
SCHEDULE_MODES = ("permutation", "iid")


# ---------------------------------------------------------------------------
# contraction constants


def log_contraction_constants(eta: float, Bbar: int) -> tuple[float, float]:
    """``(log Gamma, log gamma)`` for significance floor ``eta`` and window ``Bbar``."""
    if not (0.0 < eta < 1.0):
        raise ValueError(f"eta must lie in (0, 1), got {eta!r}")
    if Bbar < 1:
        raise ValueError(f"Bbar must be a positive integer, got {Bbar!r}")
    log_eta_B = Bbar * math.log(eta)  # log(eta^Bbar) < 0
    log1m = math.log1p(-math.exp(log_eta_B))  # log(1 - eta^Bbar)
    # log(1 + eta^-Bbar) = logaddexp(0, -log_eta_B)
    log_Gamma = math.log(2.0) + float(np.logaddexp(0.0, -log_eta_B)) - log1m
    log_gamma = log1m / Bbar
    return log_Gamma, log_gamma


def contraction_constants(eta: float, Bbar: int) -> tuple[float, float]:
    """Return ``(Gamma, gamma)`` with

    Gamma = 2 (1 + eta^-Bbar) / (1 - eta^Bbar),  gamma = (1 - eta^Bbar)^(1/Bbar).

    ``Gamma`` may overflow to ``inf`` and ``gamma`` may round to ``1.0``
    for long windows; use :func:`log_contraction_constants` for those.
    """
    log_Gamma, log_gamma = log_contraction_constants(eta, Bbar)
    with np.errstate(over="ignore"):
        Gamma = float(np.exp(log_Gamma))
    return Gamma, math.exp(log_gamma)


# ---------------------------------------------------------------------------
# pool


@dataclass(frozen=True)
class NetworkPool:
    """A pool of doubly stochastic weight matrices and its constants.

    ``B`` is the intercommunication bound guaranteed by the permutation
    scheduler and ``Bbar = (m - 1) * B``.
    """

    matrices: np.ndarray  # (pool_size, m, m)
    eta: float
    B: int
    Bbar: int
    log_Gamma: float
    log_gamma: float
    seed: int | None = None
    edge_prob: float | None = None

    @property
    def m(self) -> int:
        return self.matrices.shape[1]

    @property
    def size(self) -> int:
        return self.matrices.shape[0]

    @property
    def Gamma(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_Gamma))

    @property
    def gamma(self) -> float:
        return math.exp(self.log_gamma)

    def bound(self, steps) -> np.ndarray | float:
        """``Gamma * gamma ** steps`` evaluated in log space."""
        steps = np.asarray(steps, dtype=np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            if self.log_Gamma == -np.inf:
                out = np.zeros_like(steps)
            else:
                out = np.exp(self.log_Gamma + steps * self.log_gamma)
        return float(out) if out.ndim == 0 else out

    @classmethod
    def from_matrices(cls, matrices, B: int | None = None, seed=None, edge_prob=None,
                      eta: float | None = None) -> "NetworkPool":
        """Wrap explicit matrices.

        ``eta`` defaults to the smallest nonzero entry; ``B`` defaults to
        the permutation-scheduler guarantee ``2 * pool_size - 1``.
        """
        mats = np.ascontiguousarray(np.asarray(matrices, dtype=np.float64))
        if mats.ndim == 2:
            mats = mats[None]
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ValueError(f"expected a stack of square matrices, got shape {mats.shape}")
        P, m, _ = mats.shape
        if P < 1:
            raise ValueError("pool must contain at least one matrix")
        if B is None:
            B = 2 * P - 1
        nz = mats[mats > 0]
        if eta is None:
            eta = float(nz.min()) if nz.size else 0.0
        Bbar = (m - 1) * B
        if m == 1:
            # a single agent is always in exact consensus
            log_Gamma, log_gamma = -np.inf, -np.inf
        elif 0.0 < eta < 1.0:
            log_Gamma, log_gamma = log_contraction_constants(eta, Bbar)
        else:
            log_Gamma, log_gamma = np.inf, 0.0
        return cls(mats, float(eta), int(B), int(Bbar), float(log_Gamma), float(log_gamma),
                   seed, edge_prob)


def metropolis_weights(adj: np.ndarray) -> np.ndarray:
    """Symmetric Metropolis weights ``1 / (1 + max(deg_i, deg_j))`` on a 0/1 adjacency."""
    adj = np.asarray(adj, dtype=bool)
    m = adj.shape[0]
    deg = adj.sum(axis=1)
    W = np.zeros((m, m))
    ii, jj = np.nonzero(np.triu(adj, 1))
    w = 1.0 / (1.0 + np.maximum(deg[ii], deg[jj]))
    W[ii, jj] = w
    W[jj, ii] = w
    W[np.diag_indices(m)] = 1.0 - W.sum(axis=1)
    return W


def _is_connected(adj) -> bool:
    n_comp, _ = connected_components(csr_matrix(adj), directed=False)
    return n_comp == 1


def generate_pool(m: int, pool_size: int, edge_prob: float, seed=None) -> NetworkPool:
    """Draw ``pool_size`` Metropolis matrices on connected Erdos-Renyi graphs.

    Each graph keeps every edge independently with probability
    ``edge_prob`` and is redrawn until connected.
    """
    if m < 2:
        raise ValueError(f"a network needs at least 2 agents, got m={m}")
    if pool_size < 1:
        raise ValueError(f"pool_size must be >= 1, got {pool_size}")
    if not (0.0 < edge_prob <= 1.0):
        raise ValueError(f"edge_prob must lie in (0, 1], got {edge_prob}")
    rng = np.random.default_rng(seed)
    mats = []
    iu = np.triu_indices(m, 1)
    for _ in range(pool_size):
        for _attempt in range(MAX_CONNECT_ATTEMPTS):
            adj = np.zeros((m, m), dtype=bool)
            adj[iu] = rng.random(iu[0].size) < edge_prob
            adj |= adj.T
            if _is_connected(adj):
                break
        else:
            raise RuntimeError(
                f"no connected graph found within the retry cap of {MAX_CONNECT_ATTEMPTS} "
                f"attempts (m={m}, edge_prob={edge_prob})"
            )
        mats.append(metropolis_weights(adj))
    return NetworkPool.from_matrices(np.stack(mats), seed=seed, edge_prob=edge_prob)


# ---------------------------------------------------------------------------
# assumption checks


@dataclass
class ValidationReport:
    row_residuals: np.ndarray
    col_residuals: np.ndarray
    min_diagonal: float
    min_offdiag_nonzero: float
    connected: bool
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        status = "pass" if self.passed else "FAIL: " + "; ".join(self.failures)
        return (f"max row residual {self.row_residuals.max():.3e}, "
                f"max col residual {self.col_residuals.max():.3e}, "
                f"min diag {self.min_diagonal:.4g}, connected={self.connected} -> {status}")


def validate_assumption2(pool: NetworkPool, tol: float = 1e-12) -> ValidationReport:
    """Check double stochasticity, significant weights and union connectivity."""
    mats = pool.matrices
    P, m, _ = mats.shape
    rows = np.abs(mats.sum(axis=2) - 1.0).max(axis=1)
    cols = np.abs(mats.sum(axis=1) - 1.0).max(axis=1)
    diag = np.diagonal(mats, axis1=1, axis2=2)
    off = mats.copy()
    off[:, np.arange(m), np.arange(m)] = 0.0
    off_nz = off[off > 0]
    failures = []
    for p in np.nonzero(rows > tol)[0]:
        failures.append(f"matrix {p}: row-stochasticity violated (residual {rows[p]:.3e})")
    for p in np.nonzero(cols > tol)[0]:
        failures.append(f"matrix {p}: column-stochasticity violated (residual {cols[p]:.3e})")
    if np.any(mats < 0):
        failures.append("negative weight entries")
    eta = pool.eta
    if m > 1 and not (0.0 < eta < 1.0):
        failures.append(f"significance floor eta={eta} outside (0, 1)")
    if diag.min() < eta - tol:
        failures.append(f"diagonal weight {diag.min():.4g} below eta={eta:.4g}")
    if off_nz.size and off_nz.min() < eta - tol:
        failures.append(f"off-diagonal weight {off_nz.min():.4g} below eta={eta:.4g}")
    union = (off > 0).any(axis=0)
    union = union | union.T
    connected = True if m == 1 else _is_connected(union)
    if not connected:
        failures.append("connectivity: union graph of the pool is disconnected")
    if m > 1 and not pool.log_gamma < 0:
        failures.append("contraction rate gamma is not below 1")
    return ValidationReport(rows, cols, float(diag.min()),
                            float(off_nz.min()) if off_nz.size else float("nan"),
                            connected, failures)


# ---------------------------------------------------------------------------
# scheduling and mixing


class MatrixSchedule:
    """Seeded draw of pool indices, one per communication step.

    ``permutation`` mode walks a random permutation of the pool and
    re-permutes after each full pass.  Every matrix therefore appears in
    any window of ``2 * pool_size - 1`` consecutive steps.  ``iid`` mode
    draws uniformly at random and carries no deterministic window.
    """

    def __init__(self, pool_size: int, rng: np.random.Generator, mode: str = "permutation"):
        if mode not in SCHEDULE_MODES:
            raise ValueError(f"unknown schedule mode {mode!r}; expected one of {SCHEDULE_MODES}")
        self.pool_size = pool_size
        self.rng = rng
        self.mode = mode
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def draw(self, s: int) -> np.ndarray:
        if s < 0:
            raise ValueError("step count must be >= 0")
        if self.mode == "iid":
            return self.rng.integers(0, self.pool_size, size=s).astype(np.int64)
        out = np.empty(s, dtype=np.int64)
        filled = 0
        while filled < s:
            if self._pos >= self._perm.size:
                self._perm = self.rng.permutation(self.pool_size).astype(np.int64)
                self._pos = 0
            take = min(s - filled, self._perm.size - self._pos)
            out[filled:filled + take] = self._perm[self._pos:self._pos + take]
            filled += take
            self._pos += take
        return out


def _as_agent_block(values, m):
    V = np.asarray(values, dtype=np.float64)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    if V.ndim != 2 or V.shape[0] != m:
        raise ValueError(f"expected {m} agent values, got array of shape {np.shape(values)}")
    return np.ascontiguousarray(V), squeeze


def consensus_round(values, A) -> np.ndarray:
    """One exchange: ``out_i = sum_j A_ij values_j``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"weight matrix must be square, got {A.shape}")
    V, squeeze = _as_agent_block(values, A.shape[0])
    out = A @ V
    return out[:, 0] if squeeze else out


def mix(values: np.ndarray, pool: NetworkPool, idx: np.ndarray) -> np.ndarray:
    """Apply the pool matrices ``idx`` in order to a contiguous (m, d) block."""
    return _accel.mix_rounds(values, pool.matrices, idx)


def multi_step_consensus(values, pool: NetworkPool, s: int, schedule: MatrixSchedule):
    """Run ``s`` consensus rounds with matrices drawn from ``schedule``.

    Returns the mixed values and the matrices used, in application order.
    """
    V, squeeze = _as_agent_block(values, pool.m)
    idx = schedule.draw(s)
    out = mix(V, pool, idx)
    return (out[:, 0] if squeeze else out), pool.matrices[idx]


def transition_matrix(matrices) -> np.ndarray:
    """``Phi = A(t) ... A(s)`` for matrices given in application order ``A(s), ..., A(t)``."""
    mats = [np.asarray(A, dtype=np.float64) for A in matrices]
    if not mats:
        raise ValueError("transition matrix needs at least one factor")
    Phi = mats[0]
    for A in mats[1:]:
        if A.shape != Phi.shape:
            raise ValueError(f"dimension mismatch: {A.shape} vs {Phi.shape}")
        Phi = A @ Phi
    return Phi


def window_deviation(pool: NetworkPool, idx: np.ndarray, max_len: int, n_starts: int | None = None):
    """Worst ``max_ij |Phi - 1/m|`` over windows of 1..max_len matrices of a schedule."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if n_starts is None:
        n_starts = idx.size - max_len + 1
    if n_starts < 1 or n_starts + max_len - 1 > idx.size:
        raise ValueError("schedule too short for the requested windows")
    return _accel.window_deviation(pool.matrices, idx, int(max_len), int(n_starts))


# ---------------------------------------------------------------------------
# empirical rate


@dataclass(frozen=True)
class GammaEstimate:
    rate: float
    contracting: bool
    floor_hit: bool


def empirical_gamma(pool: NetworkPool, horizon: int = 200, trials: int = 10, seed=None,
                    mode: str = "permutation", floor: float = 1e-13) -> GammaEstimate:
    """Fit the geometric decay rate of ``max_ij |Phi(t, 0) - 1/m|``.

    A log-linear least-squares fit is done on the second half of the
    segment before the deviation drops under ``floor``; the worst rate over
    ``trials`` sampled schedules is reported.
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    rng = np.random.default_rng(seed)
    rates = []
    floor_hit = False
    for _ in range(trials):
        sched = MatrixSchedule(pool.size, rng, mode)
        idx = sched.draw(horizon)
        dev = window_deviation(pool, idx, horizon, n_starts=1)
        ok = dev > floor
        if not ok[0]:
            floor_hit = True
            rates.append(0.0)
            continue
        cut = horizon if ok.all() else int(np.argmin(ok))
        floor_hit |= cut < horizon
        if cut < 2:
            # collapses below the floor within one step
            rates.append(min(floor / dev[0], 1.0))
            continue
        lo = cut // 2 if cut >= 4 else 0
        t = np.arange(1, cut + 1, dtype=np.float64)[lo:]
        slope = np.polyfit(t, np.log(dev[lo:cut]), 1)[0]
        rates.append(min(float(np.exp(slope)), 1.0))
    rate = max(rates)
    contracting = rate < 1.0 - 1e-9
    if not contracting:
        log.warning("pool shows no measurable contraction")
    return GammaEstimate(rate, contracting, floor_hit)


# ---------------------------------------------------------------------------
# text I/O


def write_pool(pool: NetworkPool, path) -> None:
    lines = [f"{pool.m} {pool.size} {pool.eta:.17g} {pool.Bbar}"]
    for A in pool.matrices:
        for row in A:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    from .util import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def read_pool(path) -> NetworkPool:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    if not rows or len(rows[0]) != 4:
        raise ValueError(f"{path}: header must be 'm pool_size eta Bbar'")
    m, P = int(rows[0][0]), int(rows[0][1])
    eta, Bbar = float(rows[0][2]), int(rows[0][3])
    body = rows[1:]
    if len(body) != m * P or any(len(r) != m for r in body):
        raise ValueError(f"{path}: expected {P} matrices of {m}x{m} entries")
    mats = np.array(body, dtype=np.float64).reshape(P, m, m)
    B = Bbar // (m - 1) if m > 1 else 1
    return NetworkPool.from_matrices(mats, B=B, eta=eta)
