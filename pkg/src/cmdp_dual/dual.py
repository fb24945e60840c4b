"""Projected subgradient descent on the Lagrange multipliers (dualDescent).

Each iteration maximizes the Lagrangian at the current multipliers (exactly
or by policy gradient), then moves the multipliers against the constraint
slacks and projects onto the nonnegative orthant.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import Cmdp, RewardBounds, reward_bounds
from .primal import (
    PgConfig,
    PrimalResult,
    StateAggregation,
    exact_lagrangian_max,
    pg_lagrangian_max,
)


class PrimalMode(str, Enum):
    EXACT = "exact"
    PG = "pg"


@dataclass(frozen=True)
class DualConfig:
    eta: float = 0.1
    k_max: int = 2000
    epsilon_stop: float = 1e-3
    primal_mode: PrimalMode = PrimalMode.EXACT
    pg: PgConfig = PgConfig()
    lambda0: tuple[float, ...] | None = None
    # run to k_max unless asked to stop at the first neighborhood entry
    stop_on_neighborhood: bool = False
    subgradient_bound: float | None = None  # B; defaults to reward_bounds(cmdp).B

    def __post_init__(self):
        object.__setattr__(self, "primal_mode", PrimalMode(self.primal_mode))
        if self.eta <= 0 or self.epsilon_stop <= 0:
            raise ValueError("eta and epsilon_stop must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")

    def to_dict(self) -> dict:
        return {
            "eta": self.eta, "k_max": self.k_max, "epsilon_stop": self.epsilon_stop,
            "primal_mode": self.primal_mode.value, "pg": self.pg.to_dict(),
            "lambda0": None if self.lambda0 is None else list(self.lambda0),
            "stop_on_neighborhood": self.stop_on_neighborhood,
            "subgradient_bound": self.subgradient_bound,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DualConfig":
        doc = dict(doc)
        if "pg" in doc and isinstance(doc["pg"], dict):
            doc["pg"] = PgConfig(**doc["pg"])
        if doc.get("lambda0") is not None:
            doc["lambda0"] = tuple(float(x) for x in doc["lambda0"])
        return cls(**doc)


@dataclass
class DualRecord:
    k: int
    lam: np.ndarray
    dual_value: float
    slacks: np.ndarray
    delta_estimate: float
    gap: float = math.nan
    values: np.ndarray | None = None


@dataclass
class DualTrace:
    records: list[DualRecord] = field(default_factory=list)
    status: str = "CapReached"
    K: int | None = None              # first iterate passing the neighborhood test
    p_star: float | None = None
    final_policy: np.ndarray | None = None
    final_theta: np.ndarray | None = None
    best_feasible_policy: np.ndarray | None = None
    best_feasible_value: float = -math.inf
    subgradient_bound: float = math.nan

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lam for r in self.records])

    @property
    def dual_values(self) -> np.ndarray:
        return np.array([r.dual_value for r in self.records])

    @property
    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.records])

    def best_index(self) -> int:
        """Iterate with the lowest dual value (the running estimate of D*)."""
        return int(np.argmin(self.dual_values))

    @property
    def best_dual_value(self) -> float:
        return float(self.dual_values.min())

    @property
    def best_lambda(self) -> np.ndarray:
        return self.records[self.best_index()].lam

    def normalized_gaps(self) -> np.ndarray:
        if self.p_star is None:
            raise ValueError("trace has no reference P*")
        return self.gaps / max(1.0, abs(self.p_star))


def dual_step(lam, slacks, eta: float) -> np.ndarray:
    """``[lambda - eta * (V - c)]_+``."""
    lam = np.asarray(lam, dtype=float)
    slacks = np.asarray(slacks, dtype=float)
    if lam.shape != slacks.shape:
        raise ValueError(f"multiplier shape {lam.shape} != slack shape {slacks.shape}")
    return np.maximum(0.0, lam - eta * slacks)


def iteration_bound(lambda0, lambda_star, eta: float, eps_acc: float) -> float:
    """``||lambda0 - lambda*||^2 / (2 eta eps)``."""
    if eta <= 0 or eps_acc <= 0:
        raise ValueError("eta and eps_acc must be positive")
    diff = np.asarray(lambda0, dtype=float) - np.asarray(lambda_star, dtype=float)
    return float(diff @ diff) / (2.0 * eta * eps_acc)


def neighborhood_bounds(bounds: RewardBounds, gamma: float, eta: float, delta: float,
                        eps_acc: float, eps_param: float, lambda_eps_norm: float,
                        p_star: float) -> tuple[float, float]:
    """Interval guaranteed to contain ``d_theta(lambda_K)``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    lower = p_star - (bounds.B_r0 + lambda_eps_norm * bounds.B_r) * eps_param / (1.0 - gamma)
    upper = p_star + eta * bounds.B / 2.0 + delta + eps_acc
    return lower, upper


def in_neighborhood(delta: float, d_ref: float, d_k: float, eta: float, B: float, eps_acc: float) -> bool:
    """The convergence proof's test ``alpha_k > -2 eps`` with
    ``alpha_k = 2 (delta + d_ref - d_k) + eta B``."""
    return 2.0 * (delta + d_ref - d_k) + eta * B > -2.0 * eps_acc


class DualDescentError(RuntimeError):
    def __init__(self, k: int, cause: Exception):
        super().__init__(f"primal solve failed at dual iteration {k}: {cause}")
        self.k = k
        self.cause = cause


def dual_descent(cmdp: Cmdp, cfg: DualConfig = DualConfig(), p_star: float | None = None,
                 aggregation: StateAggregation | None = None,
                 theta0: np.ndarray | None = None) -> DualTrace:
    """Run dualDescent and return the full per-iteration trace.

    ``dual_value`` is the Lagrangian achieved by the primal step at
    ``lambda_k``; in exact mode that is ``d(lambda_k)``.  The neighborhood
    test uses the running minimum of earlier dual values in place of the
    unknown dual optimum.
    """
    m = cmdp.m
    lam = np.zeros(m) if cfg.lambda0 is None else np.asarray(cfg.lambda0, dtype=float)
    if lam.shape != (m,) or np.any(lam < 0):
        raise ValueError("lambda0 must be a nonnegative vector of length m")
    B = cfg.subgradient_bound if cfg.subgradient_bound is not None else reward_bounds(cmdp).B
    trace = DualTrace(p_star=p_star, subgradient_bound=B)
    agg = aggregation or StateAggregation.identity(cmdp.n_states)
    theta = np.zeros((agg.n_clusters, cmdp.n_actions)) if theta0 is None else np.array(theta0, dtype=float)
    v_warm = None
    d_best_prev = math.inf
    k_max = 1 if m == 0 else cfg.k_max

    for k in range(k_max):
        try:
            exact = exact_lagrangian_max(cmdp, lam, v0=v_warm) \
                if cfg.primal_mode is PrimalMode.EXACT or cfg.pg.measure_delta else None
            if exact is not None:
                v_warm = exact.state_values
            if cfg.primal_mode is PrimalMode.EXACT:
                res: PrimalResult = exact
            else:
                res = pg_lagrangian_max(cmdp, lam, theta, cfg.pg, agg,
                                        exact_dual_value=None if exact is None else exact.dual_value)
                theta = res.theta
        except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            raise DualDescentError(k, exc) from exc

        slacks = res.slacks(cmdp.thresholds)
        gap = res.dual_value - p_star if p_star is not None else math.nan
        trace.records.append(DualRecord(k, lam.copy(), res.dual_value, slacks,
                                        res.delta_estimate, gap, res.values))
        trace.final_policy = res.policy
        trace.final_theta = res.theta
        if np.all(slacks >= 0) and res.values[0] > trace.best_feasible_value:
            trace.best_feasible_value = float(res.values[0])
            trace.best_feasible_policy = res.policy

        if trace.K is None and k > 0 and in_neighborhood(
                max(res.delta_estimate, 0.0), d_best_prev, res.dual_value, cfg.eta, B, cfg.epsilon_stop):
            trace.K = k
            if cfg.stop_on_neighborhood:
                trace.status = "Converged"
                break
        d_best_prev = min(d_best_prev, res.dual_value)
        lam = dual_step(lam, slacks, cfg.eta)

    if m == 0:
        trace.status = "Converged"
        trace.K = 0
    return trace


TRACE_DIGITS = 12


def write_trace_csv(trace: DualTrace, fh) -> None:
    """Header ``k, lambda_0.., dual_value, slack_0.., delta_estimate, gap``."""
    m = trace.records[0].lam.size if trace.records else 0
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["k", *[f"lambda_{i}" for i in range(m)], "dual_value",
                     *[f"slack_{i}" for i in range(m)], "delta_estimate", "gap"])
    fmt = lambda x: f"{float(x):.{TRACE_DIGITS}g}"  # noqa: E731
    for r in trace.records:
        writer.writerow([r.k, *map(fmt, r.lam), fmt(r.dual_value), *map(fmt, r.slacks),
                         fmt(r.delta_estimate), fmt(r.gap)])


def read_trace_csv(fh) -> list[dict]:
    return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _cutting_plane(values: np.ndarray, thresholds: np.ndarray, lam_cap: float) -> np.ndarray | None:
    from .lp import LpProblem, solve_lp

    m = values.shape[1] - 1
    slopes = values[:, 1:] - thresholds
    # variables [lambda (m), t_plus, t_minus];  maximize -(t_plus - t_minus)
    n_pieces = values.shape[0]
    c = np.concatenate([np.zeros(m), [-1.0, 1.0]])
    A_ub = np.hstack([slopes, -np.ones((n_pieces, 1)), np.ones((n_pieces, 1))])
    A_ub = np.vstack([A_ub, np.hstack([np.eye(m), np.zeros((m, 2))])])
    b_ub = np.concatenate([-values[:, 0], np.full(m, lam_cap)])
    sol = solve_lp(LpProblem(c=c, A_eq=np.zeros((0, m + 2)), b_eq=np.zeros(0), A_ub=A_ub, b_ub=b_ub))
    return np.clip(sol.x[:m], 0.0, None) if sol.optimal else None


def cutting_plane_multiplier(trace: DualTrace, thresholds: np.ndarray,
                             lam_cap: float | None = None) -> np.ndarray:
    """Minimizer over ``0 <= lambda <= lam_cap`` of
    ``max_k V_0(pi_k) + lambda^T (V(pi_k) - c)``.

    Every primal iterate contributes one affine minorant of the dual
    function; the minimizer of their maximum is a multiplier at which the
    dual function is worth re-evaluating exactly.
    """
    values = np.unique(np.round(np.array([r.values for r in trace.records]), 12), axis=0)
    if values.shape[1] == 1:
        return np.zeros(0)
    if lam_cap is None:
        lam_cap = 10.0 * (1.0 + float(trace.lambdas.max()))
    lam = _cutting_plane(values, thresholds, lam_cap)
    return trace.best_lambda if lam is None else lam


def refined_dual_value(cmdp: Cmdp, trace: DualTrace) -> tuple[float, np.ndarray]:
    """Lowest exact dual value among the iterates and the cutting-plane
    multipliers of every trace prefix that added a new affine piece.

    All candidates are genuine evaluations of ``d``, so the result is an
    upper bound on the dual optimum.  Because a longer run of the same
    configuration only adds candidates, the estimate never gets worse as
    ``k_max`` grows.
    """
    best_val, best_lam = trace.best_dual_value, trace.best_lambda
    if cmdp.m == 0:
        return best_val, best_lam
    pieces, seen, lam_max = [], set(), 0.0
    for r in trace.records:
        lam_max = max(lam_max, float(r.lam.max()))
        key = tuple(np.round(r.values, 12))
        if key in seen:
            continue
        seen.add(key)
        pieces.append(r.values)
        lam_cp = _cutting_plane(np.array(pieces), cmdp.thresholds, 10.0 * (1.0 + lam_max))
        if lam_cp is None:
            continue
        d_cp = exact_lagrangian_max(cmdp, lam_cp).dual_value
        if d_cp < best_val:
            best_val, best_lam = d_cp, lam_cp
    return best_val, best_lam
