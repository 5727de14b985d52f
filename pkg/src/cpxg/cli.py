"""Command-line harness.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import _accel
from .checks import FAULTS, SCOPES, inject_fault, run_checks
from .config import KEYS, ExperimentConfig, load, serialize
from .diagnostics import CSV_FIELDS
from .network import generate_pool, read_pool, write_pool
from .objectives import dump_sparse_dataset, format_metadata, load_sparse_dataset, synth_problem
from .solvers import DISTRIBUTED, ConfigError, run, solve_optimum
from .util import atomic_write_text, fmt_float

log = logging.getLogger("cpxg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# flag -> (config key, argparse kwargs)
FLAGS = {
    "--algo": ("algo", {}),
    "--alpha": ("alpha", {}),
    "--schedule": ("schedule", {}),
    "--schedule-const": ("schedule.const", {}),
    "--schedule-mode": ("schedule.mode", {}),
    "--gamma-source": ("schedule.gamma", {}),
    "--budget": ("budget", {}),
    "--iterations": ("iterations", {}),
    "--seed": ("seed", {}),
    "--diagnostics": ("diagnostics", {"nargs": "?", "const": "true"}),
    "--kind": ("problem.kind", {}),
    "--agents": ("problem.agents", {}),
    "--dim": ("problem.dim", {}),
    "--samples": ("problem.samples", {}),
    "--lambda": ("problem.lambda", {}),
    "--dataset": ("problem.dataset", {}),
    "--normalize": ("problem.normalize", {"nargs": "?", "const": "true"}),
    "--pool-size": ("pool.size", {}),
    "--edge-prob": ("pool.edge_prob", {}),
    "--pool-file": ("pool.file", {}),
    "--e-scale": ("error.e_scale", {}),
    "--e-rate": ("error.e_rate", {}),
    "--eps-scale": ("error.eps_scale", {}),
    "--eps-rate": ("error.eps_rate", {}),
    "--out": ("out", {}),
    "--methods": ("methods", {}),
}


# ---------------------------------------------------------------------------
# trace serialization


def trace_csv(trace, method: str | None = None) -> str:
    """The trace as CSV (fixed header, 17 significant digits)."""
    head = list(CSV_FIELDS) + (["method"] if method is not None else [])
    lines = [",".join(head)]
    for r in trace.records:
        row = [str(r.k), str(r.t), str(r.s_k)] + [fmt_float(getattr(r, f)) for f in CSV_FIELDS[3:]]
        if method is not None:
            row.append(method)
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _metadata_block(cfg, problem, pool, trace, algo):
    meta = {
        "algorithm": algo,
        "backend": _accel.BACKEND,
        "seed": cfg.resolved_seed(),
        "problem_seed": cfg.problem_seed,
        "pool_seed": cfg.pool_seed,
        "run_seed": cfg.run_seed,
        "alpha": trace.meta.get("alpha"),
        "iterations": len(trace.records),
        "communication_steps": trace.total_steps,
        "f_star": problem.f_star,
        "final_gap": trace.records[-1].f_gap,
        "wall_time_s": round(trace.wall_time, 6),
    }
    if pool is not None:
        meta.update(pool_size=pool.size, eta=pool.eta, Bbar=pool.Bbar,
                    log_Gamma=pool.log_Gamma, log_gamma=pool.log_gamma)
    if trace.meta.get("gamma_heuristic"):
        meta["gamma_heuristic"] = True
    body = "\n".join(f"{k} = {v}" for k, v in meta.items())
    return f"[run]\n{body}\n\n[problem]\n{format_metadata(problem.metadata())}\n\n[config]\n{serialize(cfg)}"


# ---------------------------------------------------------------------------
# building blocks


def _problem(cfg: ExperimentConfig):
    if cfg.dataset:
        p = load_sparse_dataset(cfg.dataset, cfg.agents, cfg.lam, normalize=cfg.normalize)
    else:
        p = synth_problem(cfg.agents, cfg.dim, cfg.samples, cfg.kind, lam=cfg.lam, seed=cfg.problem_seed)
    solve_optimum(p)
    return p


def _pool(cfg: ExperimentConfig, m: int, needed: bool):
    if not needed:
        return None
    if cfg.pool_file:
        pool = read_pool(cfg.pool_file)
        if pool.m != m:
            raise ConfigError(f"pool.file: pool has {pool.m} agents, problem has {m}")
        return pool
    if m == 1:
        from .network import NetworkPool

        return NetworkPool.from_matrices(np.ones((1, 1, 1)))
    return generate_pool(m, cfg.pool_size, cfg.edge_prob, seed=cfg.pool_seed)


def _execute(cfg, p, pool, algo):
    return run(p, pool, cfg.run_config(algo), cfg.error_spec())


# ---------------------------------------------------------------------------
# commands


def cmd_run(cfg: ExperimentConfig) -> int:
    cfg.validate()
    p = _problem(cfg)
    pool = _pool(cfg, p.m, cfg.algo in DISTRIBUTED)
    trace = _execute(cfg, p, pool, cfg.algo)
    os.makedirs(cfg.out, exist_ok=True)
    atomic_write_text(os.path.join(cfg.out, "trace.csv"), trace_csv(trace))
    atomic_write_text(os.path.join(cfg.out, "run.txt"), _metadata_block(cfg, p, pool, trace, cfg.algo))
    last = trace.records[-1]
    print(f"{cfg.algo}: {len(trace.records)} iterations, t={last.t}, f_gap={last.f_gap:.6e} -> {cfg.out}")
    return EXIT_OK


def _aligned(traces, labels):
    """Union grid over t with each method's latest gap carried forward."""
    grid = sorted({r.t for tr in traces for r in tr.records})
    cols = []
    for tr in traces:
        ts = np.array([r.t for r in tr.records])
        gs = [r.f_gap for r in tr.records]
        pos = np.searchsorted(ts, grid, side="right") - 1
        cols.append(["" if i < 0 else fmt_float(gs[i]) for i in pos])
    lines = [",".join(["t"] + labels)]
    for j, t in enumerate(grid):
        lines.append(",".join([str(t)] + [c[j] for c in cols]))
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: ExperimentConfig) -> int:
    cfg.validate()
    methods = list(cfg.methods)
    if len(methods) < 2:
        raise ConfigError("methods: compare needs at least two methods")
    if cfg.budget is None:
        raise ConfigError("budget: compare needs a common communication budget")
    p = _problem(cfg)
    pool = _pool(cfg, p.m, any(mth in DISTRIBUTED for mth in methods))
    os.makedirs(cfg.out, exist_ok=True)
    traces, labels = [], []
    for i, mth in enumerate(methods):
        tr = _execute(cfg, p, pool, mth)
        label = f"{i}_{mth}"
        atomic_write_text(os.path.join(cfg.out, f"trace_{label}.csv"), trace_csv(tr, mth))
        traces.append(tr)
        labels.append(label)
    atomic_write_text(os.path.join(cfg.out, "compare.csv"), _aligned(traces, labels))
    rows = [f"{'method':<28} {'iterations':>10} {'steps':>8} {'final_gap':>24} {'min_gap':>24}"]
    for label, tr in zip(labels, traces):
        g = tr.column("f_gap")
        rows.append(f"{label:<28} {len(tr.records):>10d} {tr.total_steps:>8d} "
                    f"{fmt_float(g[-1]):>24} {fmt_float(np.nanmin(g)):>24}")
    summary = "\n".join(rows) + "\n"
    atomic_write_text(os.path.join(cfg.out, "summary.txt"), summary + "\n[config]\n" + serialize(cfg))
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_check(scope: str, fault: str | None, seed: int) -> int:
    if scope not in SCOPES:
        raise ConfigError(f"scope: unknown scope {scope!r}; choose from {', '.join(SCOPES)}")
    if fault:
        inject_fault(fault)
    t0 = time.perf_counter()
    results = run_checks(scope, seed=seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    for r in failed:
        print(f"failed invariant: {r.scope}.{r.name}")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_gen_pool(cfg: ExperimentConfig) -> int:
    cfg.validate()
    pool = generate_pool(cfg.agents, cfg.pool_size, cfg.edge_prob, seed=cfg.pool_seed)
    write_pool(pool, cfg.out)
    print(f"pool of {pool.size} matrices (m={pool.m}, eta={pool.eta:.6g}, Bbar={pool.Bbar}) -> {cfg.out}")
    return EXIT_OK


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    cfg.validate()
    if cfg.kind != "logistic":
        raise ConfigError("problem.kind: the sparse dataset format carries classification labels only")
    p = synth_problem(cfg.agents, cfg.dim, cfg.samples, "logistic", lam=cfg.lam, seed=cfg.problem_seed)
    atomic_write_text(cfg.out, dump_sparse_dataset(p))
    print(f"{cfg.agents * cfg.samples} samples, d={cfg.dim} -> {cfg.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling


def _add_config_flags(sp):
    sp.add_argument("--config", help="configuration file (key = value lines)")
    for flag, (key, kw) in FLAGS.items():
        sp.add_argument(flag, dest="cfg_" + KEYS[key][0], default=None, metavar="V",
                        help=f"overrides '{key}'", **kw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpxg", description="Distributed proximal-gradient experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run one method and write its trace"),
                           ("compare", "run several methods on the same problem and pool"),
                           ("gen-pool", "write a generated weight-matrix pool"),
                           ("gen-data", "write a synthetic dataset in sparse text format")):
        _add_config_flags(sub.add_parser(name, help=helptext))
    ck = sub.add_parser("check", help="run the invariant battery")
    ck.add_argument("--scope", default="all", help=f"one of {', '.join(SCOPES)}")
    ck.add_argument("--seed", type=int, default=0)
    ck.add_argument("--fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)
    return ap


def resolve_config(ns) -> ExperimentConfig:
    cfg = load(ns.config) if getattr(ns, "config", None) else ExperimentConfig()
    updates = {}
    for flag, (key, _) in FLAGS.items():
        attr, conv = KEYS[key]
        raw = getattr(ns, "cfg_" + attr, None)
        if raw is None:
            continue
        try:
            updates[attr] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} from {flag} ({exc})") from None
    if ns.command in ("gen-pool", "gen-data") and "out" not in updates and cfg.out == ExperimentConfig.out:
        updates["out"] = "pool.txt" if ns.command == "gen-pool" else "data.txt"
    return cfg.with_updates(updates)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "check":
            return cmd_check(ns.scope, ns.fault, ns.seed)
        cfg = resolve_config(ns)
        handler = {"run": cmd_run, "compare": cmd_compare,
                   "gen-pool": cmd_gen_pool, "gen-data": cmd_gen_data}[ns.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
