"""One-shot multi-step lookahead Bayesian optimization over GP surrogates."""

from .acquisition import (
    AcquisitionValue,
    TreeLayout,
    TreeVariables,
    batch_improvement_mc,
    binoculars_select,
    ei_analytic,
    eno_objective,
    extract_candidate,
    multi_step_objective,
    selection_probabilities,
)
from .benchmarks import (
    FUNCTIONS,
    BenchmarkFunction,
    BenchmarkTrace,
    gap,
    gap_value,
    oracle_optimum,
    run_bo,
    run_experiment,
    synthetic_function,
)
from .fantasy import CacheUpdateBlocks, FantasyModel, cache_size_accounting, fantasize, update_root_cache
from .gp import (
    Dataset,
    FitConfig,
    GpModel,
    KernelHyperparams,
    NotPSDError,
    Posterior,
    fit_hyperparameters,
    kernel_eval,
    posterior,
    root_decompose,
)
from .optimize import (
    OptimizationError,
    OptimizerConfig,
    PolicyConfig,
    WarmStartState,
    gradient,
    optimize_box,
    parse_policy,
    propose_next,
    warm_start_init,
)
from .sampling import BaseSampleTree, correlate, draw_base_samples, gauss_hermite_rule

__all__ = [
    "AcquisitionValue",
    "BaseSampleTree",
    "BenchmarkFunction",
    "BenchmarkTrace",
    "CacheUpdateBlocks",
    "Dataset",
    "FUNCTIONS",
    "FantasyModel",
    "FitConfig",
    "GpModel",
    "KernelHyperparams",
    "NotPSDError",
    "OptimizationError",
    "OptimizerConfig",
    "PolicyConfig",
    "Posterior",
    "TreeLayout",
    "TreeVariables",
    "WarmStartState",
    "batch_improvement_mc",
    "binoculars_select",
    "cache_size_accounting",
    "correlate",
    "draw_base_samples",
    "ei_analytic",
    "eno_objective",
    "extract_candidate",
    "fantasize",
    "fit_hyperparameters",
    "gap",
    "gap_value",
    "gauss_hermite_rule",
    "gradient",
    "kernel_eval",
    "multi_step_objective",
    "optimize_box",
    "oracle_optimum",
    "parse_policy",
    "posterior",
    "propose_next",
    "root_decompose",
    "run_bo",
    "run_experiment",
    "selection_probabilities",
    "synthetic_function",
    "update_root_cache",
    "warm_start_init",
]
