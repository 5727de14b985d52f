"""Per-agent smooth losses, the global objective, and problem construction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .prox import ProxSpec, h_value, subgradient_bound

log = logging.getLogger(__name__)

KINDS = ("logistic", "least_squares")

POWER_TOL = 1e-9
POWER_MAX_ITER = 100_000


def _dim(A):
    return A.shape[1]


def _row_norms(A):
    if sp.issparse(A):
        return np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    return np.linalg.norm(A, axis=1)


def top_eigenvalue_gram(A, tol=POWER_TOL, max_iter=POWER_MAX_ITER) -> float:
    """Largest eigenvalue of ``A' A`` by power iteration (relative tolerance ``tol``)."""
    d = _dim(A)
    if A.shape[0] == 0 or (sp.issparse(A) and A.nnz == 0) or (not sp.issparse(A) and not np.any(A)):
        return 0.0
    v = np.random.default_rng(0).standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        w = np.asarray(w).ravel()
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol * abs(lam_new):
            # one more Rayleigh step on the normalised iterate
            w = np.asarray(A.T @ (A @ v)).ravel()
            return max(lam_new, float(v @ w))
        lam = lam_new
    raise RuntimeError(
        f"power iteration did not reach relative tolerance {tol:g} in {max_iter} steps "
        f"(last change {abs(lam_new - lam):.3e} at estimate {lam_new:.6g})"
    )


@dataclass(frozen=True, eq=False)
class SmoothComponent:
    """One agent's differentiable loss.

    ``logistic``:       (1/n) sum_j log(1 + exp(-b_j <a_j, x>)), labels in {-1, +1}
    ``least_squares``:  (1/2) ||A x - b||^2

    ``A`` may be a dense array or a scipy sparse matrix (rows are samples).
    """

    kind: str
    A: object
    b: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown component kind {self.kind!r}")
        A = self.A if sp.issparse(self.A) else np.asarray(self.A, dtype=np.float64)
        if sp.issparse(A):
            A = sp.csr_matrix(A, dtype=np.float64)
        if A.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        b = np.asarray(self.b, dtype=np.float64).ravel()
        if b.shape[0] != A.shape[0]:
            raise ValueError(f"{A.shape[0]} samples but {b.shape[0]} targets")
        if A.shape[0] == 0:
            raise ValueError("component has no samples")
        if self.kind == "logistic" and not np.all(np.abs(b) == 1.0):
            raise ValueError("logistic labels must be exactly -1 or +1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n_samples(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of dimension {self.dim}, got shape {x.shape}")
        return x

    def value(self, x) -> float:
        x = self._check(x)
        r = np.asarray(self.A @ x).ravel()
        if self.kind == "logistic":
            return float(np.mean(np.logaddexp(0.0, -self.b * r)))
        res = r - self.b
        return 0.5 * float(res @ res)

    def gradient(self, x) -> np.ndarray:
        x = self._check(x)
        r = np.asarray(self.A @ x).ravel()
        if self.kind == "logistic":
            # expit is overflow-safe for large margins
            w = -self.b * expit(-self.b * r) / self.n_samples
        else:
            w = r - self.b
        return np.asarray(self.A.T @ w).ravel()

    def lipschitz_constant(self) -> float:
        lam = top_eigenvalue_gram(self.A)
        if lam == 0.0:
            log.warning("component has all-zero features; gradient is constant (L=0)")
            return 0.0
        if self.kind == "logistic":
            return lam / (4.0 * self.n_samples)
        return lam

    def gradient_bound(self, radius: float | None = None) -> float:
        """Bound on ``||grad||``: global for logistic, on the ball ``||x|| <= radius`` otherwise."""
        if self.kind == "logistic":
            return float(np.sum(_row_norms(self.A))) / self.n_samples
        if radius is None:
            raise ValueError("least-squares gradients are unbounded; supply a ball radius")
        Atb = np.asarray(self.A.T @ self.b).ravel()
        return self.lipschitz_constant() * radius + float(np.linalg.norm(Atb))


@dataclass(eq=False)
class DistributedProblem:
    """``f(x) = (1/m) sum_i g_i(x) + h(x)`` over ``m`` agents.

    ``f_star``/``x_star`` are filled in by the centralized oracle
    (:func:`cpxg.solvers.solve_optimum`).
    """

    components: list
    h: ProxSpec
    seed: int | None = None
    ball_radius: float | None = None
    f_star: float | None = None
    x_star: np.ndarray | None = None
    L: float = field(init=False)
    lipschitz: np.ndarray = field(init=False)
    G_g: float = field(init=False)
    G_g_global: bool = field(init=False)

    def __post_init__(self):
        if not self.components:
            raise ValueError("problem needs at least one component")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")
        self.lipschitz = np.array([c.lipschitz_constant() for c in self.components])
        self.L = float(self.lipschitz.max())
        if not self.L > 0:
            raise ValueError("global Lipschitz constant is zero (degenerate features)")
        self.G_g_global = all(c.kind == "logistic" for c in self.components)
        if self.G_g_global:
            self.G_g = max(c.gradient_bound() for c in self.components)
        else:
            R = self.ball_radius if self.ball_radius is not None else 10.0
            self.G_g = max(c.gradient_bound(R) for c in self.components)

    @property
    def m(self) -> int:
        return len(self.components)

    @property
    def d(self) -> int:
        return self.components[0].dim

    @property
    def lam(self) -> float:
        return self.h.weight

    @property
    def G_h(self) -> float:
        return subgradient_bound(self.h, self.d)

    @property
    def kind(self) -> str:
        kinds = {c.kind for c in self.components}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def smooth_value(self, x) -> float:
        return sum(c.value(x) for c in self.components) / self.m

    def smooth_gradient(self, x) -> np.ndarray:
        g = self.components[0].gradient(x)
        for c in self.components[1:]:
            g = g + c.gradient(x)
        return g / self.m

    def objective(self, x) -> float:
        return self.smooth_value(x) + h_value(self.h, x)

    def agent_gradients(self, X) -> np.ndarray:
        """Row ``i`` is ``grad g_i(X[i])``; combined in agent order."""
        return np.stack([c.gradient(X[i]) for i, c in enumerate(self.components)])

    def metadata(self) -> dict:
        return {
            "m": self.m,
            "d": self.d,
            "kind": self.kind,
            "lambda": self.lam,
            "L": self.L,
            "G_g": self.G_g,
            "G_g_global": self.G_g_global,
            "G_h": self.G_h,
            "seed": self.seed,
            "f_star": self.f_star,
        }


def global_objective(p: DistributedProblem, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.d,):
        raise ValueError(f"expected a vector of dimension {p.d}, got shape {x.shape}")
    return p.objective(x)


def format_metadata(meta: dict) -> str:
    """``key=value`` block, one pair per line, stable key order."""
    out = []
    for k, v in meta.items():
        if isinstance(v, float):
            v = format(v, ".17g")
        out.append(f"{k}={v}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# construction


def synth_problem(m: int, d: int, samples_per_agent: int, kind: str = "logistic",
                  lam: float = 0.01, seed=None, sparsity: float = 0.1) -> DistributedProblem:
    """Seeded synthetic problem.

    A sparse ground-truth parameter with ``ceil(sparsity * d)`` Gaussian
    entries, standard Gaussian features, and logistic (or noisy linear)
    responses.  Each agent draws its own block of samples.
    """
    if min(m, d, samples_per_agent) < 1:
        raise ValueError("m, d and samples_per_agent must all be >= 1")
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    rng = np.random.default_rng(seed)
    x_true = np.zeros(d)
    support = rng.choice(d, size=max(1, math.ceil(sparsity * d)), replace=False)
    x_true[np.sort(support)] = rng.standard_normal(support.size)
    comps = []
    for _ in range(m):
        A = rng.standard_normal((samples_per_agent, d))
        if kind == "logistic":
            p_pos = expit(A @ x_true)
            b = np.where(rng.random(samples_per_agent) < p_pos, 1.0, -1.0)
        else:
            b = A @ x_true + 0.1 * rng.standard_normal(samples_per_agent)
        comps.append(SmoothComponent(kind, A, b))
    h = ProxSpec.l1(lam) if lam > 0 else ProxSpec.zero()
    return DistributedProblem(comps, h, seed=seed)


def _split_blocks(n, m):
    """Contiguous near-equal blocks (sizes differ by at most one)."""
    base, extra = divmod(n, m)
    sizes = [base + (1 if i < extra else 0) for i in range(m)]
    return np.cumsum([0] + sizes)


def parse_sparse_lines(lines, source="<input>"):
    """Parse ``label idx:val idx:val ...`` lines (1-based indices).

    Returns ``(rows, cols, vals, labels, n_features)`` in COO form.
    """
    rows, cols, vals, labels = [], [], [], []
    d = 0
    r = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip().replace("−", "-")
        if not line:
            continue
        parts = line.split()
        try:
            label = float(parts[0])
        except ValueError:
            raise ValueError(f"{source}:{lineno}: bad label {parts[0]!r}") from None
        labels.append(1.0 if label > 0 else -1.0)
        for tok in parts[1:]:
            idx, sep, val = tok.partition(":")
            if not sep:
                raise ValueError(f"{source}:{lineno}: expected index:value, got {tok!r}")
            try:
                j = int(idx)
                v = float(val)
            except ValueError:
                raise ValueError(f"{source}:{lineno}: malformed feature {tok!r}") from None
            if j < 1:
                raise ValueError(f"{source}:{lineno}: feature indices are 1-based, got {j}")
            if not math.isfinite(v):
                raise ValueError(f"{source}:{lineno}: non-finite feature value {val!r}")
            rows.append(r)
            cols.append(j - 1)
            vals.append(v)
            d = max(d, j)
        r += 1
    return rows, cols, vals, labels, d


def load_sparse_dataset(path, m: int, lam: float, normalize: bool = False,
                        n_features: int | None = None) -> DistributedProblem:
    """Read a sparse classification file and split it contiguously over ``m`` agents."""
    with open(path) as fh:
        rows, cols, vals, labels, d = parse_sparse_lines(fh, source=str(path))
    n = len(labels)
    if n < m:
        raise ValueError(f"{path}: {n} samples cannot be split over {m} agents")
    if n_features is not None:
        if n_features < d:
            raise ValueError(f"{path}: feature index {d} exceeds declared dimension {n_features}")
        d = n_features
    if d == 0:
        raise ValueError(f"{path}: no features found")
    X = sp.csr_matrix((vals, (rows, cols)), shape=(n, d), dtype=np.float64)
    if normalize:
        scale = np.asarray(abs(X).max(axis=0).todense()).ravel()
        scale[scale == 0] = 1.0
        X = sp.csr_matrix(X @ sp.diags(1.0 / scale))
    y = np.asarray(labels)
    cuts = _split_blocks(n, m)
    comps = [SmoothComponent("logistic", X[cuts[i]:cuts[i + 1]], y[cuts[i]:cuts[i + 1]])
             for i in range(m)]
    h = ProxSpec.l1(lam) if lam > 0 else ProxSpec.zero()
    return DistributedProblem(comps, h)


def dump_sparse_dataset(p: DistributedProblem) -> str:
    """Serialise a logistic problem in the sparse text format (agent order)."""
    out = []
    for c in p.components:
        if c.kind != "logistic":
            raise ValueError("only logistic problems have a sparse-text form")
        A = sp.csr_matrix(c.A)
        for r in range(A.shape[0]):
            lo, hi = A.indptr[r], A.indptr[r + 1]
            feats = " ".join(f"{j + 1}:{v:.17g}" for j, v in zip(A.indices[lo:hi], A.data[lo:hi]))
            lab = "+1" if c.b[r] > 0 else "-1"
            out.append(f"{lab} {feats}".rstrip())
    return "\n".join(out) + "\n"
