"""Occupancy-measure linear programs and a dense two-phase simplex solver.

The solver works on ``max c^T x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,
x >= 0`` with Bland's rule, so it terminates on degenerate problems.
Multipliers for the ``<=`` rows come back nonnegative and play the role
of the CMDP Lagrange multipliers.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .core import Cmdp, reward_bounds
from .evaluation import policy_from_occupation
from .tolerances import TOL


class LpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


class LpError(RuntimeError):
    """Iteration cap hit or numerically inconsistent basis."""


@dataclass(frozen=True, eq=False)
class LpProblem:
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.c).shape[0]
        for name, shape in (("A_eq", (-1, n)), ("A_ub", (-1, n))):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(shape)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "b_eq", np.asarray(self.b_eq, dtype=float).reshape(-1))
        object.__setattr__(self, "b_ub", np.asarray(self.b_ub, dtype=float).reshape(-1))
        if self.A_eq.shape[0] != self.b_eq.shape[0] or self.A_ub.shape[0] != self.b_ub.shape[0]:
            raise ValueError("constraint matrix / right-hand side row mismatch")
        for name in ("c", "A_eq", "b_eq", "A_ub", "b_ub"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    @property
    def n_cons(self) -> int:
        return self.A_eq.shape[0] + self.A_ub.shape[0]


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray | None = None
    objective: float = -np.inf
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0))      # <= rows, >= 0
    eq_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    degenerate: bool = False
    primal_residual: float = np.nan
    slackness_residual: float = np.nan

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class _Tableau:
    """Rows ``0..k-1`` are constraints, row ``k`` holds reduced costs
    ``d_j = c_B B^-1 A_j - c_j``; last column is the right-hand side."""

    def __init__(self, A, b, basis):
        k, n = A.shape
        self.T = np.zeros((k + 1, n + 1))
        self.T[:k, :n] = A
        self.T[:k, n] = b
        self.basis = list(basis)

    def set_objective(self, c):
        k = len(self.basis)
        cb = c[self.basis]
        self.T[k, :-1] = cb @ self.T[:k, :-1] - c
        self.T[k, -1] = cb @ self.T[:k, -1]

    def refactor(self, A, b, c):
        B = A[:, self.basis]
        k = len(self.basis)
        self.T[:k, :-1] = np.linalg.solve(B, A)
        self.T[:k, -1] = np.linalg.solve(B, b)
        self.set_objective(c)

    def pivot(self, row, col):
        kernels.pivot(self.T, row, col)
        self.basis[row] = col


def _run_simplex(tab: _Tableau, allowed: np.ndarray, tol: float, budget: list[int]) -> str:
    k = len(tab.basis)
    T = tab.T
    while True:
        d = T[k, :-1]
        candidates = np.flatnonzero((d < -tol) & allowed)
        if candidates.size == 0:
            return "optimal"
        col = int(candidates[0])  # Bland: lowest index
        column = T[:k, col]
        rows = np.flatnonzero(column > tol)
        if rows.size == 0:
            return "unbounded"
        ratios = T[rows, -1] / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol * max(1.0, abs(best))]
        row = int(min(ties, key=lambda r: tab.basis[r]))
        tab.pivot(row, col)
        budget[0] -= 1
        if budget[0] < 0:
            raise LpError("simplex iteration cap exceeded")


def solve_lp(lp: LpProblem, tol: float = TOL.lp_pivot, feas_tol: float = TOL.lp_feasibility) -> LpSolution:
    """Two-phase dense simplex (maximization)."""
    n, k_eq, k_ub = lp.n_vars, lp.A_eq.shape[0], lp.A_ub.shape[0]
    k = k_eq + k_ub
    if k == 0:
        if np.any(lp.c > tol):
            return LpSolution(LpStatus.UNBOUNDED)
        return LpSolution(LpStatus.OPTIMAL, x=np.zeros(n), objective=0.0, duals=np.zeros(0),
                          eq_duals=np.zeros(0), primal_residual=0.0, slackness_residual=0.0)

    # standard form: [A_eq 0; A_ub I] [x; s] = b, rows flipped so b >= 0
    A = np.zeros((k, n + k_ub))
    A[:k_eq, :n] = lp.A_eq
    A[k_eq:, :n] = lp.A_ub
    A[k_eq:, n:] = np.eye(k_ub)
    b = np.concatenate([lp.b_eq, lp.b_ub])
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign
    n_std = n + k_ub

    A1 = np.hstack([A, np.eye(k)])
    c1 = np.zeros(n_std + k)
    c1[n_std:] = -1.0
    tab = _Tableau(A1, b, range(n_std, n_std + k))
    tab.set_objective(c1)
    budget = [50 * (n + k)]
    iters0 = budget[0]

    allowed = np.ones(n_std + k, dtype=bool)
    _run_simplex(tab, allowed, tol, budget)
    tab.refactor(A1, b, c1)
    _run_simplex(tab, allowed, tol, budget)
    if -tab.T[k, -1] > feas_tol:
        return LpSolution(LpStatus.INFEASIBLE, iterations=iters0 - budget[0])

    # drive zero-level artificials out of the basis; drop redundant rows
    keep = list(range(k))
    for row in range(k):
        if tab.basis[row] < n_std:
            continue
        nz = np.flatnonzero(np.abs(tab.T[row, :n_std]) > tol)
        if nz.size:
            tab.pivot(row, int(nz[0]))
        else:
            keep.remove(row)
    basis = [tab.basis[r] for r in keep]
    A2, b2 = A[keep], b[keep]
    c2 = np.zeros(n_std)
    c2[:n] = lp.c
    tab = _Tableau(A2, b2, basis)
    tab.refactor(A2, b2, c2)

    allowed = np.ones(n_std, dtype=bool)
    for _ in range(5):
        status = _run_simplex(tab, allowed, tol, budget)
        if status == "unbounded":
            return LpSolution(LpStatus.UNBOUNDED, iterations=iters0 - budget[0])
        tab.refactor(A2, b2, c2)
        if np.all(tab.T[-1, :-1] >= -tol):
            break
    else:
        raise LpError("could not certify optimality after refactorization")

    B = A2[:, tab.basis]
    xb = np.linalg.solve(B, b2)
    z = np.zeros(n_std)
    z[tab.basis] = np.clip(xb, 0.0, None)
    y_kept = np.linalg.solve(B.T, c2[tab.basis])
    y = np.zeros(k)
    y[keep] = y_kept
    y *= sign
    x = z[:n]

    slack_ub = lp.b_ub - lp.A_ub @ x
    primal_res = max(
        float(np.abs(lp.A_eq @ x - lp.b_eq).max(initial=0.0)),
        float(np.clip(-slack_ub, 0.0, None).max(initial=0.0)),
    )
    duals = np.clip(y[k_eq:], 0.0, None)
    reduced = lp.c - lp.A_eq.T @ y[:k_eq] - lp.A_ub.T @ duals
    cs = max(
        float(np.abs(duals * slack_ub).max(initial=0.0)),
        float(np.abs(reduced * x).max(initial=0.0)),
    )
    return LpSolution(
        LpStatus.OPTIMAL,
        x=x,
        objective=float(lp.c @ x),
        duals=duals,
        eq_duals=y[:k_eq],
        iterations=iters0 - budget[0],
        degenerate=bool(np.any(np.abs(xb) <= tol)),
        primal_residual=primal_res,
        slackness_residual=cs,
    )


# ---------------------------------------------------------------------------
# occupancy LP


def build_occupancy_lp(cmdp: Cmdp, xi=None) -> LpProblem:
    """Bellman-flow LP over ``rho(s, a) >= 0`` (flattened ``s * A + a``)."""
    n_s, n_a, g = cmdp.n_states, cmdp.n_actions, cmdp.gamma
    xi = np.zeros(cmdp.m) if xi is None else np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (cmdp.m,):
        raise ValueError(f"perturbation has length {xi.size}, CMDP has m={cmdp.m}")
    out_flow = np.repeat(np.eye(n_s), n_a, axis=1)
    in_flow = cmdp.transition.reshape(n_s * n_a, n_s).T
    A_eq = out_flow - g * in_flow
    b_eq = (1.0 - g) * cmdp.initial_dist
    scale = 1.0 / (1.0 - g)
    c = scale * cmdp.rewards[0].reshape(-1)
    A_ub = -scale * cmdp.rewards[1:].reshape(cmdp.m, n_s * n_a)
    b_ub = -(cmdp.thresholds + xi)
    return LpProblem(c=c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub)


def _solve_occupancy(cmdp: Cmdp, xi) -> LpSolution:
    sol = solve_lp(build_occupancy_lp(cmdp, xi))
    if sol.status is LpStatus.UNBOUNDED:
        raise LpError("occupancy LP reported unbounded; its feasible set is bounded")
    return sol


def perturbation_value(cmdp: Cmdp, xi=None) -> float:
    """``P(xi)``; ``-inf`` when the perturbed problem is infeasible."""
    sol = _solve_occupancy(cmdp, xi)
    return sol.objective if sol.optimal else -np.inf


@dataclass
class PrimalOptimum:
    status: LpStatus
    p_star: float
    policy: np.ndarray | None
    lambda_lp: np.ndarray | None
    rho: np.ndarray | None
    solution: LpSolution


def primal_optimum(cmdp: Cmdp, xi=None) -> PrimalOptimum:
    sol = _solve_occupancy(cmdp, xi)
    if not sol.optimal:
        return PrimalOptimum(sol.status, -np.inf, None, None, None, sol)
    rho = sol.x.reshape(cmdp.n_states, cmdp.n_actions)
    return PrimalOptimum(sol.status, sol.objective, policy_from_occupation(rho), sol.duals, rho, sol)


def concavity_probe(cmdp: Cmdp, xi1, xi2, mu: float) -> float:
    """``P(mu xi1 + (1-mu) xi2) - mu P(xi1) - (1-mu) P(xi2)``; ``+inf`` when
    either endpoint is infeasible."""
    if not 0.0 < mu < 1.0:
        raise ValueError("mu must lie in (0, 1)")
    xi1, xi2 = np.asarray(xi1, dtype=float), np.asarray(xi2, dtype=float)
    p1, p2 = perturbation_value(cmdp, xi1), perturbation_value(cmdp, xi2)
    if not (np.isfinite(p1) and np.isfinite(p2)):
        return np.inf
    pm = perturbation_value(cmdp, mu * xi1 + (1.0 - mu) * xi2)
    return pm - mu * p1 - (1.0 - mu) * p2


def vacuous_xi(cmdp: Cmdp) -> np.ndarray:
    """A perturbation below every achievable constraint value."""
    bounds = reward_bounds(cmdp)
    return np.full(cmdp.m, -2.0 * bounds.B_r / (1.0 - cmdp.gamma) - np.abs(cmdp.thresholds).max(initial=0.0) - 1.0)


# ---------------------------------------------------------------------------
# plain-text dump


def _block(fh, title, A, b):
    fh.write(f"{title} {A.shape[0]} {A.shape[1]}\n")
    for row, rhs in zip(A, b):
        fh.write(" ".join(repr(float(v)) for v in row) + " | " + repr(float(rhs)) + "\n")


def dump_lp(lp: LpProblem) -> str:
    fh = io.StringIO()
    fh.write(f"maximize {lp.n_vars}\n")
    fh.write(" ".join(repr(float(v)) for v in lp.c) + "\n")
    _block(fh, "A_eq|b_eq", lp.A_eq, lp.b_eq)
    _block(fh, "A_ineq|b_ineq", lp.A_ub, lp.b_ub)
    return fh.getvalue()


def load_lp(text: str) -> LpProblem:
    lines = iter(text.splitlines())
    n = int(next(lines).split()[1])
    c = np.array([float(v) for v in next(lines).split()]) if n else np.zeros(0)

    def block():
        _, rows, _ = next(lines).split()
        A, b = [], []
        for _ in range(int(rows)):
            lhs, rhs = next(lines).split("|")
            A.append([float(v) for v in lhs.split()])
            b.append(float(rhs))
        return np.array(A).reshape(-1, n), np.array(b)

    A_eq, b_eq = block()
    A_ub, b_ub = block()
    return LpProblem(c=c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub)
