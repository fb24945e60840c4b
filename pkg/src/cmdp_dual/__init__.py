"""Primal-dual solution of finite constrained MDPs with exact LP certificates."""
from .core import (
    Cmdp,
    GridworldConfig,
    RewardBounds,
    ValidationReport,
    build_gridworld,
    greedy_path,
    load_cmdp,
    reward_bounds,
    validate,
)
from .dual import DualConfig, DualTrace, PrimalMode, dual_descent, neighborhood_bounds, refined_dual_value
from .evaluation import lagrangian, occupation_measure, policy_values, state_values
from .lp import LpProblem, LpStatus, primal_optimum, solve_lp
from .primal import PgConfig, PgMode, SoftmaxPolicy, StateAggregation, exact_lagrangian_max, pg_lagrangian_max

__version__ = "0.1.0"

__all__ = [
    "Cmdp", "DualConfig", "DualTrace", "GridworldConfig", "LpProblem", "LpStatus", "PgConfig", "PgMode",
    "PrimalMode", "RewardBounds", "SoftmaxPolicy", "StateAggregation", "ValidationReport",
    "build_gridworld", "dual_descent", "exact_lagrangian_max", "greedy_path", "lagrangian", "load_cmdp",
    "neighborhood_bounds", "occupation_measure", "pg_lagrangian_max", "policy_values", "primal_optimum",
    "refined_dual_value", "reward_bounds", "solve_lp", "state_values", "validate",
]
