"""Numeric tolerances shared by every module."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    prob_sum: float = 1e-12      # rows of P, p0, policies
    solve: float = 1e-10         # linear-system residual
    identity: float = 1e-9       # cross-checks between exact solvers
    occupancy_sum: float = 1e-10
    vi: float = 1e-12            # Bellman residual for value iteration
    tie: float = 1e-12           # greedy tie-break window (relative)
    lp_pivot: float = 1e-9
    lp_feasibility: float = 1e-8
    logit_floor: float = 1e-12


TOL = Tolerances()
