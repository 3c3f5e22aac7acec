"""Partition-valued MCMC for Bayesian clustering with a regenerative convergence diagnostic."""
from .consensus import ConsensusMatrix, co_occurrence_rs, cumulative_mass_curve, map_allocation
from .diagnostics import DiagnosticResult, PartitionScheme, cv_diagnostic, hotelling_rs, top_k_scheme
from .errors import (
    InsufficientRegenerationError,
    InsufficientStatesError,
    InvalidHyperparameterError,
    InvalidInputError,
    OptimizationFailure,
    PartmcError,
    ResourceLimitError,
)
from .model import (
    DataMatrix,
    EBFit,
    HyperParams,
    eb_gradient,
    eb_objective,
    fit_empirical_bayes,
    log_marglik,
    log_posterior_unnorm,
    log_prior,
    simulate_data,
)
from .partitions import Allocation, bell, canonicalize, enumerate_partitions, stirling2
from .regen import GSpec, Tours, find_tours, rs_cov, rs_estimate, rs_mean
from .samplers import ChainConfig, gibbs_sweep, run_chain, split_merge_update
from .trace import Trace

__version__ = "0.1.0"

__all__ = [
    "Allocation", "ChainConfig", "ConsensusMatrix", "DataMatrix", "DiagnosticResult", "EBFit", "GSpec",
    "HyperParams", "InsufficientRegenerationError", "InsufficientStatesError", "InvalidHyperparameterError",
    "InvalidInputError", "OptimizationFailure", "PartitionScheme", "PartmcError", "ResourceLimitError",
    "Tours", "Trace", "bell", "canonicalize", "co_occurrence_rs", "cumulative_mass_curve", "cv_diagnostic",
    "eb_gradient", "eb_objective", "enumerate_partitions", "find_tours", "fit_empirical_bayes",
    "gibbs_sweep", "hotelling_rs", "log_marglik", "log_posterior_unnorm", "log_prior", "map_allocation",
    "rs_cov", "rs_estimate", "rs_mean", "run_chain", "simulate_data", "split_merge_update", "stirling2",
    "top_k_scheme",
]
