"""Variable-metric forward-backward-forward splitting with extrapolation from the past."""

from .fbf_solver import (
    ErrorSchedule,
    InclusionProblem,
    RunResult,
    SolverConfig,
    StepsizeError,
    StopReason,
    StopRule,
    run,
    run_classic,
    validate_stepsize,
)
from .metric_algebra import MetricOperator, MetricSchedule, scalar_rule
from .operators import LinearMap, LipschitzMap, Proximable, ResolventOperator
from .primal_dual import Block, PrimalDualProblem, build_product_inclusion, run_blocks, step_blocks

__version__ = "0.1.0"

__all__ = [
    "Block",
    "ErrorSchedule",
    "InclusionProblem",
    "LinearMap",
    "LipschitzMap",
    "MetricOperator",
    "MetricSchedule",
    "PrimalDualProblem",
    "Proximable",
    "ResolventOperator",
    "RunResult",
    "SolverConfig",
    "StepsizeError",
    "StopReason",
    "StopRule",
    "build_product_inclusion",
    "run",
    "run_blocks",
    "run_classic",
    "scalar_rule",
    "step_blocks",
    "validate_stepsize",
]
