"""Distributed proximal-gradient methods with multi-step consensus over time-varying networks."""
from ._accel import BACKEND
from .diagnostics import (
    CertConstants,
    IterationRecord,
    error_bounds,
    exact_error_e,
    exact_error_eps,
    poly_geo_sum,
    polynomial_constants,
    prop2_bound,
    rate_fit,
    recursion_check,
    summability_report,
)
from .network import (
    NetworkPool,
    contraction_constants,
    empirical_gamma,
    generate_pool,
    multi_step_consensus,
    transition_matrix,
    validate_assumption2,
)
from .objectives import DistributedProblem, SmoothComponent, load_sparse_dataset, synth_problem
from .prox import ProxSpec, prox, prox_gap
from .solvers import (
    ErrorSpec,
    RunConfig,
    RunTrace,
    consensus_schedule,
    iterations_for_budget,
    momentum_coefficient,
    run,
    run_accelerated_singlestep,
    run_basic_proxgrad,
    run_basic_subgradient,
    run_central_exact,
    run_central_inexact,
    run_multistep_accelerated,
    run_multistep_after_prox,
    solve_optimum,
)

__version__ = "0.1.0"
