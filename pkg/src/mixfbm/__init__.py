"""Mixed fractional Brownian motion SDEs with random drift effects: simulation and MLE."""

__version__ = "0.1.0"

from .estimate import EstimationResult, fisher_information, fit_mu_known_var, mle_direct, mle_joint, mle_mu_known_var
from .kernel import KernelTable, solve_kernel
from .likelihood import SufficientStats, compute_stats, log_lambda, panel_loglik
from .mcstudy import McReport, StudyConfig, estimate_limits, normality_test, run_study
from .sim import (
    DegenerateEffect,
    GaussianEffect,
    LinearMultiplier,
    TabulatedDensity,
    TimeGrid,
    simulate_fbm,
    simulate_mixed_fbm,
    simulate_panel,
)
from .transform import transform, transform_path

__all__ = [
    "DegenerateEffect",
    "EstimationResult",
    "GaussianEffect",
    "KernelTable",
    "LinearMultiplier",
    "McReport",
    "StudyConfig",
    "SufficientStats",
    "TabulatedDensity",
    "TimeGrid",
    "compute_stats",
    "estimate_limits",
    "fisher_information",
    "fit_mu_known_var",
    "log_lambda",
    "mle_direct",
    "mle_joint",
    "mle_mu_known_var",
    "normality_test",
    "panel_loglik",
    "run_study",
    "simulate_fbm",
    "simulate_mixed_fbm",
    "simulate_panel",
    "solve_kernel",
    "transform",
    "transform_path",
]
