"""Stochastic-optimization laboratory for least squares and diagonal linear networks.

Simulates discrete optimizers (GD, SGD, noisy SGD, per-sample-clipped noisy SGD)
and their SDE counterparts, then checks the runs against closed-form limits:
Ornstein-Uhlenbeck stationary laws, coupled-trajectory deviation bounds, and
mirror-descent limit points under the hyperbolic entropy.
"""

from .core_math import (
    Mat,
    Vec,
    RngStream,
    Trajectory,
    fmt17,
    min_norm_solve,
    row_space_projector,
    solve_lyapunov,
    spectral_norm,
)
from .problems import (
    Dataset,
    default_step_size,
    gen_sparse_regression,
    gen_underparam_regression,
    load_dataset,
    save_dataset,
)
from .mirror import (
    ConvergenceError,
    PotentialParams,
    TiltedProblem,
    bregman,
    mu_bound,
    phi_grad,
    phi_grad_inverse,
    phi_hessian_diag,
    phi_value,
    prop3_check,
    solve_tilted,
)
from .lsq_dynamics import (
    EtaReport,
    LsqState,
    OptimizerConfig,
    StationaryLaw,
    clip,
    eta_bound_rhs,
    lsq_discrete_step,
    simulate_coupled_over,
    simulate_ou_under,
    stationary_law_theory,
)
from .dln_dynamics import (
    DivergenceError,
    DlnState,
    NoiseSchedule,
    accumulate_r_infinity,
    dln_discrete_step,
    dln_init,
    dln_loss,
    effective_alpha,
    effective_init,
    run_dln_discrete,
    simulate_dln_sde,
)
from .harness import (
    ALPHA_SWEEP,
    EXPERIMENTS,
    LIMIT_DISTANCE_FLOOR,
    SIGMA_GRID,
    ExperimentConfig,
    RunRecord,
    aggregate,
    apply_overrides,
    bundled_config,
    config_text,
    parse_config,
    run_alpha_sweep,
    run_experiment,
    trend_check,
)

__all__ = [
    "Mat",
    "Vec",
    "RngStream",
    "Trajectory",
    "fmt17",
    "min_norm_solve",
    "row_space_projector",
    "solve_lyapunov",
    "spectral_norm",
    "Dataset",
    "default_step_size",
    "gen_sparse_regression",
    "gen_underparam_regression",
    "load_dataset",
    "save_dataset",
    "ConvergenceError",
    "PotentialParams",
    "TiltedProblem",
    "bregman",
    "mu_bound",
    "phi_grad",
    "phi_grad_inverse",
    "phi_hessian_diag",
    "phi_value",
    "prop3_check",
    "solve_tilted",
    "EtaReport",
    "LsqState",
    "OptimizerConfig",
    "StationaryLaw",
    "clip",
    "eta_bound_rhs",
    "lsq_discrete_step",
    "simulate_coupled_over",
    "simulate_ou_under",
    "stationary_law_theory",
    "DivergenceError",
    "DlnState",
    "NoiseSchedule",
    "accumulate_r_infinity",
    "dln_discrete_step",
    "dln_init",
    "dln_loss",
    "effective_alpha",
    "effective_init",
    "run_dln_discrete",
    "simulate_dln_sde",
    "ALPHA_SWEEP",
    "EXPERIMENTS",
    "LIMIT_DISTANCE_FLOOR",
    "SIGMA_GRID",
    "ExperimentConfig",
    "RunRecord",
    "aggregate",
    "apply_overrides",
    "bundled_config",
    "config_text",
    "parse_config",
    "run_alpha_sweep",
    "run_experiment",
    "trend_check",
]
