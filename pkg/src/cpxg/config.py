"""Experiment configuration and its plain-text file format.

The file format is one ``key = value`` per line, ``#`` starts a comment,
nested scopes use dotted keys (``pool.size = 10``).  Unknown keys are
rejected.  ``serialize`` writes every key, so ``parse(serialize(c)) == c``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields

from .solvers import ALGORITHMS, SCHEDULES, ConfigError, ErrorSpec, RunConfig

SEED_ENV = "CPXG_SEED"


def _opt_float(s):
    return None if s.lower() in ("", "none", "auto") else float(s)


def _opt_int(s):
    return None if s.lower() in ("", "none") else int(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _methods(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _str(s):
    return s


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(v)
    return str(v)


# dotted key -> (attribute, parser)
KEYS = {
    "algo": ("algo", _str),
    "alpha": ("alpha", _opt_float),
    "schedule": ("schedule", _str),
    "schedule.const": ("schedule_const", int),
    "schedule.mode": ("schedule_mode", _str),
    "schedule.gamma": ("gamma_source", _str),
    "budget": ("budget", _opt_int),
    "iterations": ("iterations", _opt_int),
    "seed": ("seed", _opt_int),
    "diagnostics": ("diagnostics", _bool),
    "problem.kind": ("kind", _str),
    "problem.agents": ("agents", int),
    "problem.dim": ("dim", int),
    "problem.samples": ("samples", int),
    "problem.lambda": ("lam", float),
    "problem.dataset": ("dataset", _str),
    "problem.normalize": ("normalize", _bool),
    "pool.size": ("pool_size", int),
    "pool.edge_prob": ("edge_prob", float),
    "pool.file": ("pool_file", _str),
    "error.e_scale": ("e_scale", float),
    "error.e_rate": ("e_rate", float),
    "error.eps_scale": ("eps_scale", float),
    "error.eps_rate": ("eps_rate", float),
    "out": ("out", _str),
    "methods": ("methods", _methods),
}
ATTR_TO_KEY = {attr: key for key, (attr, _) in KEYS.items()}


@dataclass
class ExperimentConfig:
    """Everything one CLI invocation needs.

    Seeds are derived from ``seed``: the problem uses ``seed``, the pool
    ``seed + 1`` and the run (matrix schedule, injected errors) ``seed + 2``.
    ``seed=None`` resolves to ``CPXG_SEED`` or 0 at use time.
    """

    algo: str = "multistep_accelerated"
    alpha: float | None = None
    schedule: str = "linear"
    schedule_const: int = 1
    schedule_mode: str = "permutation"
    gamma_source: str = "theoretical"
    budget: int | None = 2000
    iterations: int | None = None
    seed: int | None = None
    diagnostics: bool = False
    kind: str = "logistic"
    agents: int = 10
    dim: int = 100
    samples: int = 113
    lam: float = 0.01
    dataset: str = ""
    normalize: bool = False
    pool_size: int = 10
    edge_prob: float = 0.3
    pool_file: str = ""
    e_scale: float = 0.0
    e_rate: float = 0.0
    eps_scale: float = 0.0
    eps_rate: float = 0.0
    out: str = "cpxg_out"
    methods: tuple = ()

    # ------------------------------------------------------------------
    def resolved_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV, "").strip()
        if env:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"seed: environment variable {SEED_ENV}={env!r} is not an integer") from None
        return 0

    @property
    def problem_seed(self):
        return self.resolved_seed()

    @property
    def pool_seed(self):
        return self.resolved_seed() + 1

    @property
    def run_seed(self):
        return self.resolved_seed() + 2

    def run_config(self, algo: str | None = None) -> RunConfig:
        return RunConfig(
            algorithm=algo or self.algo,
            alpha=self.alpha,
            schedule=self.schedule,
            schedule_const=self.schedule_const,
            budget=self.budget,
            iterations=self.iterations,
            seed=self.run_seed,
            diagnostics=self.diagnostics,
            schedule_mode=self.schedule_mode,
            gamma_source=self.gamma_source,
        )

    def error_spec(self) -> ErrorSpec:
        return ErrorSpec(self.e_scale, self.e_rate, self.eps_scale, self.eps_rate)

    def validate(self) -> None:
        """Raise ``ConfigError`` naming the first invalid field."""

        def bad(attr, msg):
            raise ConfigError(f"{ATTR_TO_KEY[attr]}: {msg}")

        for algo in (self.algo,) + tuple(self.methods):
            if algo not in ALGORITHMS:
                bad("methods" if algo != self.algo else "algo", f"unknown method {algo!r}")
        if self.alpha is not None and not (math.isfinite(self.alpha) and self.alpha > 0):
            bad("alpha", f"step size must be positive, got {self.alpha!r}")
        if self.schedule not in SCHEDULES:
            bad("schedule", f"unknown schedule {self.schedule!r}")
        if self.schedule_const < 1:
            bad("schedule_const", "must be >= 1")
        if self.schedule_mode not in ("permutation", "iid"):
            bad("schedule_mode", f"unknown mode {self.schedule_mode!r}")
        if self.gamma_source not in ("theoretical", "empirical"):
            bad("gamma_source", f"unknown value {self.gamma_source!r}")
        if self.budget is None and self.iterations is None:
            bad("budget", "a communication budget or an iteration count is required")
        if self.budget is not None and self.budget < 1:
            bad("budget", f"must be >= 1, got {self.budget}")
        if self.iterations is not None and self.iterations < 1:
            bad("iterations", f"must be >= 1, got {self.iterations}")
        if self.kind not in ("logistic", "least_squares"):
            bad("kind", f"unknown problem kind {self.kind!r}")
        for attr in ("agents", "dim", "samples", "pool_size"):
            if getattr(self, attr) < 1:
                bad(attr, f"must be >= 1, got {getattr(self, attr)}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            bad("lam", f"must be finite and >= 0, got {self.lam!r}")
        if not (0.0 < self.edge_prob <= 1.0):
            bad("edge_prob", f"must lie in (0, 1], got {self.edge_prob!r}")
        for attr in ("e_scale", "e_rate", "eps_scale", "eps_rate"):
            v = getattr(self, attr)
            if not (math.isfinite(v) and v >= 0):
                bad(attr, f"must be finite and >= 0, got {v!r}")
        if self.dataset and not os.path.isfile(self.dataset):
            bad("dataset", f"file not found: {self.dataset}")
        if self.pool_file and not os.path.isfile(self.pool_file):
            bad("pool_file", f"file not found: {self.pool_file}")
        if self.seed is not None and self.seed < 0:
            bad("seed", f"must be >= 0, got {self.seed}")

    def with_updates(self, updates: dict) -> "ExperimentConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(updates)
        return ExperimentConfig(**kw)


def parse_value(key: str, raw: str):
    if key not in KEYS:
        raise ConfigError(f"{key}: unknown configuration key")
    attr, conv = KEYS[key]
    try:
        return attr, conv(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw.strip()!r} ({exc})") from None


def parse(text: str, base: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    """Read the ``key = value`` format on top of ``base`` (defaults if omitted)."""
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = body.split("=", 1)
        attr, val = parse_value(key.strip(), raw)
        updates[attr] = val
    return (base or ExperimentConfig()).with_updates(updates)


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    return parse(text, source=str(path))


def serialize(cfg: ExperimentConfig) -> str:
    lines = [f"{key} = {_fmt(getattr(cfg, attr))}" for key, (attr, _) in KEYS.items()]
    return "\n".join(lines) + "\n"
