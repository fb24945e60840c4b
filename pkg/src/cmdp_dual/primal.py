"""Lagrangian maximization over policies.

Two routes: an exact one (value iteration on the scalarized reward) and an
approximate one (softmax policy gradient over a state-aggregated logit
table, either with exact gradients or REINFORCE estimates).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from . import kernels
from .core import Cmdp, _check_lambda, scalarized_reward
from .evaluation import (
    lagrangian_from_values,
    policy_tv_epsilon,
    policy_values,
    state_occupancy,
    state_values,
)
from .tolerances import TOL


class ViResult(NamedTuple):
    v: np.ndarray
    policy: np.ndarray
    residual: float


def greedy_policy(q: np.ndarray, tie: float = TOL.tie) -> np.ndarray:
    """One-hot argmax per row; ties (relative window ``tie``) go to the
    lowest action index."""
    best = q.max(axis=1, keepdims=True)
    window = tie * np.maximum(1.0, np.abs(best))
    a = np.argmax(q >= best - window, axis=1)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), a] = 1.0
    return pi


def value_iteration(cmdp: Cmdp, reward: np.ndarray, tol: float = TOL.vi,
                    v0: np.ndarray | None = None, max_sweeps: int = 50) -> ViResult:
    """Optimal values for ``reward`` and the greedy deterministic policy.

    A short burst of Bellman sweeps is followed by exact evaluation of the
    greedy policy (policy-iteration polish), repeated until the Bellman
    residual is below ``tol``.
    """
    P = np.ascontiguousarray(cmdp.transition)
    r = np.ascontiguousarray(reward, dtype=float)
    g = cmdp.gamma
    v = np.zeros(cmdp.n_states) if v0 is None else np.asarray(v0, dtype=float)
    v, residual = kernels.vi_sweeps(P, r, v, g, max_sweeps, tol)
    actions = np.argmax(kernels.bellman_q(P, r, v, g), axis=1)
    rows = np.arange(cmdp.n_states)
    for _ in range(10 * cmdp.n_states + 100):
        pi = np.zeros((cmdp.n_states, cmdp.n_actions))
        pi[rows, actions] = 1.0
        v = state_values(cmdp, pi, r)
        q = kernels.bellman_q(P, r, v, g)
        residual = float(np.abs(q.max(axis=1) - v).max())
        if residual <= tol:
            break
        # switch only where strictly better; Howard's rule cannot cycle
        current = q[rows, actions]
        best = q.argmax(axis=1)
        improve = q[rows, best] > current + TOL.tie * np.maximum(1.0, np.abs(current))
        if not improve.any():
            break
        actions = np.where(improve, best, actions)
    greedy = greedy_policy(q)
    if not np.array_equal(greedy.argmax(axis=1), actions):
        v = state_values(cmdp, greedy, r)
        residual = float(np.abs(kernels.bellman_q(P, r, v, g).max(axis=1) - v).max())
    return ViResult(v, greedy, residual)


@dataclass
class PrimalResult:
    policy: np.ndarray
    dual_value: float
    values: np.ndarray
    theta: np.ndarray | None = None
    delta_estimate: float = 0.0
    state_values: np.ndarray | None = None
    iterations: int = 0

    def slacks(self, thresholds: np.ndarray) -> np.ndarray:
        return self.values[1:] - thresholds


def exact_lagrangian_max(cmdp: Cmdp, lam, v0: np.ndarray | None = None) -> PrimalResult:
    """``d(lambda)`` by value iteration on ``r_lambda``."""
    lam = _check_lambda(cmdp, lam)
    vi = value_iteration(cmdp, scalarized_reward(cmdp, lam), v0=v0)
    values = policy_values(cmdp, vi.policy)
    return PrimalResult(
        policy=vi.policy,
        dual_value=lagrangian_from_values(values, cmdp.thresholds, lam),
        values=values,
        state_values=vi.v,
    )


# ---------------------------------------------------------------------------
# parametrized policies


@dataclass(frozen=True, eq=False)
class StateAggregation:
    cluster_of: np.ndarray
    n_clusters: int

    def __post_init__(self):
        c = np.asarray(self.cluster_of, dtype=np.int64)
        object.__setattr__(self, "cluster_of", c)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("cluster map must be a non-empty vector")
        if set(np.unique(c).tolist()) != set(range(self.n_clusters)):
            raise ValueError("cluster indices must be dense in [0, n_clusters)")

    @classmethod
    def identity(cls, n_states: int) -> "StateAggregation":
        return cls(np.arange(n_states), n_states)

    @classmethod
    def single(cls, n_states: int) -> "StateAggregation":
        return cls(np.zeros(n_states, dtype=np.int64), 1)

    @classmethod
    def from_map(cls, cluster_of) -> "StateAggregation":
        _, dense = np.unique(np.asarray(cluster_of), return_inverse=True)
        return cls(dense, int(dense.max()) + 1)

    @property
    def n_states(self) -> int:
        return self.cluster_of.size

    @property
    def is_identity(self) -> bool:
        return self.n_clusters == self.n_states

    def lift(self, theta: np.ndarray, finer: "StateAggregation") -> np.ndarray:
        """Logits for ``finer`` reproducing this (coarser) class's policy.
        Requires every fine cluster to sit inside one coarse cluster."""
        parent = np.full(finer.n_clusters, -1)
        parent[finer.cluster_of] = self.cluster_of
        if np.any(parent[finer.cluster_of] != self.cluster_of):
            raise ValueError("aggregations are not nested")
        return np.asarray(theta)[parent].copy()


@dataclass(eq=False)
class SoftmaxPolicy:
    theta: np.ndarray
    aggregation: StateAggregation

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2 or self.theta.shape[0] != self.aggregation.n_clusters:
            raise ValueError("theta must have shape (n_clusters, n_actions)")


def _softmax_rows(theta: np.ndarray) -> np.ndarray:
    z = theta - theta.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def induce_policy(sp: SoftmaxPolicy) -> np.ndarray:
    return _softmax_rows(sp.theta)[sp.aggregation.cluster_of]


def _lagrangian_and_gradient(cmdp: Cmdp, sp: SoftmaxPolicy, lam: np.ndarray, r_lam: np.ndarray):
    pi = induce_policy(sp)
    v_all = state_values(cmdp, pi)                 # (m+1, S)
    values = v_all @ cmdp.initial_dist
    v_lam = v_all[0] + lam @ v_all[1:]
    q = r_lam + cmdp.gamma * (cmdp.transition @ v_lam)
    d = state_occupancy(cmdp, pi)
    per_state = d[:, None] * pi * (q - v_lam[:, None]) / (1.0 - cmdp.gamma)
    grad = np.zeros_like(sp.theta)
    np.add.at(grad, sp.aggregation.cluster_of, per_state)
    return lagrangian_from_values(values, cmdp.thresholds, lam), grad, values, pi, d, q - v_lam[:, None]


def natural_direction(agg: StateAggregation, d: np.ndarray, adv: np.ndarray, gamma: float) -> np.ndarray:
    """Fisher-preconditioned softmax direction: the occupancy-weighted mean
    advantage per cluster (plain mean for clusters with no occupancy)."""
    mass = np.bincount(agg.cluster_of, weights=d, minlength=agg.n_clusters)
    counts = np.bincount(agg.cluster_of, minlength=agg.n_clusters)
    w = np.where(mass[agg.cluster_of] > 0, d / np.where(mass > 0, mass, 1.0)[agg.cluster_of],
                 1.0 / counts[agg.cluster_of])
    out = np.zeros((agg.n_clusters, adv.shape[1]))
    np.add.at(out, agg.cluster_of, w[:, None] * adv)
    return out / (1.0 - gamma)


def exact_policy_gradient(cmdp: Cmdp, sp: SoftmaxPolicy, lam) -> np.ndarray:
    """``grad_theta L(theta, lambda)`` from the policy-gradient theorem with
    exact occupancy and action values."""
    lam = _check_lambda(cmdp, lam)
    if sp.aggregation.n_states != cmdp.n_states or sp.theta.shape[1] != cmdp.n_actions:
        raise ValueError("softmax policy does not match the CMDP dimensions")
    return _lagrangian_and_gradient(cmdp, sp, lam, scalarized_reward(cmdp, lam))[1]


def parametric_lagrangian(cmdp: Cmdp, sp: SoftmaxPolicy, lam) -> float:
    lam = _check_lambda(cmdp, lam)
    return lagrangian_from_values(policy_values(cmdp, induce_policy(sp)), cmdp.thresholds, lam)


class PgMode(str, Enum):
    EXACT = "exact"
    MONTE_CARLO = "montecarlo"


@dataclass(frozen=True)
class PgConfig:
    step_size: float = 1.0
    max_iters: int = 200
    grad_tol: float = 1e-8
    mode: PgMode = PgMode.EXACT
    mc_episodes: int = 64
    mc_horizon: int | None = None
    mc_tol: float = 1e-3
    rng_seed: int = 0
    max_halvings: int = 30
    measure_delta: bool = True
    natural: bool = True  # precondition exact-mode steps with the Fisher metric

    def __post_init__(self):
        object.__setattr__(self, "mode", PgMode(self.mode))
        if self.step_size <= 0 or self.max_iters < 0 or self.grad_tol <= 0:
            raise ValueError("step_size and grad_tol must be positive, max_iters nonnegative")

    def to_dict(self) -> dict:
        return {
            "step_size": self.step_size, "max_iters": self.max_iters, "grad_tol": self.grad_tol,
            "mode": self.mode.value, "mc_episodes": self.mc_episodes, "mc_horizon": self.mc_horizon,
            "mc_tol": self.mc_tol, "rng_seed": self.rng_seed, "max_halvings": self.max_halvings,
            "measure_delta": self.measure_delta, "natural": self.natural,
        }


def mc_horizon(cmdp: Cmdp, reward: np.ndarray, tol: float) -> int:
    b = float(np.abs(reward).max())
    if b == 0.0:
        return 1
    return max(1, math.ceil(math.log(tol * (1.0 - cmdp.gamma) / b) / math.log(cmdp.gamma)))


def reinforce_gradient(cmdp: Cmdp, sp: SoftmaxPolicy, reward: np.ndarray, episodes: int,
                       horizon: int, rng: np.random.Generator) -> np.ndarray:
    """REINFORCE estimate with discounted return-to-go."""
    pi = induce_policy(sp)
    u0 = rng.random(episodes)
    u = rng.random((episodes, horizon, 2))
    states, actions, returns = kernels.rollouts(
        np.ascontiguousarray(np.cumsum(cmdp.transition, axis=2)),
        np.ascontiguousarray(np.cumsum(pi, axis=1)),
        np.cumsum(cmdp.initial_dist),
        np.ascontiguousarray(reward, dtype=float),
        cmdp.gamma, u0, u,
    )
    weights = (cmdp.gamma ** np.arange(horizon))[None, :] * returns / episodes
    # grad log pi(a|s) wrt theta[c(s), :] = onehot(a) - pi(.|s)
    per_sa = np.zeros((cmdp.n_states, cmdp.n_actions))
    np.add.at(per_sa, (states.ravel(), actions.ravel()), weights.ravel())
    per_state = per_sa - pi * per_sa.sum(axis=1, keepdims=True)
    grad = np.zeros_like(sp.theta)
    np.add.at(grad, sp.aggregation.cluster_of, per_state)
    return grad


def pg_lagrangian_max(cmdp: Cmdp, lam, theta0: np.ndarray, cfg: PgConfig = PgConfig(),
                      aggregation: StateAggregation | None = None,
                      exact_dual_value: float | None = None) -> PrimalResult:
    """Softmax policy-gradient ascent on ``L_theta(theta, lambda)``.

    Exact mode backtracks (halves the step) whenever the Lagrangian would
    decrease, so the iterates are monotone.  Monte Carlo mode takes fixed
    steps along REINFORCE estimates.  ``delta_estimate`` is measured
    against the exact maximizer unless ``cfg.measure_delta`` is off.
    """
    lam = _check_lambda(cmdp, lam)
    agg = aggregation or StateAggregation.identity(cmdp.n_states)
    sp = SoftmaxPolicy(np.array(theta0, dtype=float, copy=True), agg)
    r_lam = scalarized_reward(cmdp, lam)
    state = _lagrangian_and_gradient(cmdp, sp, lam, r_lam)
    L, grad, values, pi = state[:4]
    if not math.isfinite(L):
        raise FloatingPointError("non-finite Lagrangian")
    it = 0
    if cfg.mode is PgMode.EXACT:
        step = cfg.step_size
        while it < cfg.max_iters:
            if cfg.natural:
                # saturated softmax rows have vanishing plain gradients, so
                # stationarity is judged on the preconditioned advantages
                direction = natural_direction(agg, state[4], state[5], cmdp.gamma)
                if direction.max() <= cfg.grad_tol:
                    break
            else:
                direction = grad
                if np.abs(grad).max() <= cfg.grad_tol:
                    break
            for _ in range(cfg.max_halvings + 1):
                trial = SoftmaxPolicy(sp.theta + step * direction, agg)
                trial_state = _lagrangian_and_gradient(cmdp, trial, lam, r_lam)
                if trial_state[0] >= L:
                    break
                step *= 0.5
            else:
                break  # no ascent at machine precision
            sp, state = trial, trial_state
            L, grad, values, pi = state[:4]
            step = min(cfg.step_size, 2.0 * step)
            it += 1
    else:
        horizon = cfg.mc_horizon or mc_horizon(cmdp, r_lam, cfg.mc_tol)
        seeds = np.random.SeedSequence(cfg.rng_seed)
        for child in seeds.spawn(cfg.max_iters):
            g = reinforce_gradient(cmdp, sp, r_lam, cfg.mc_episodes, horizon, np.random.default_rng(child))
            sp = SoftmaxPolicy(sp.theta + cfg.step_size * g, agg)
            it += 1
        values = policy_values(cmdp, induce_policy(sp))
        L = lagrangian_from_values(values, cmdp.thresholds, lam)
        pi = induce_policy(sp)

    delta = 0.0
    if cfg.measure_delta:
        if exact_dual_value is None:
            exact_dual_value = exact_lagrangian_max(cmdp, lam).dual_value
        delta = exact_dual_value - L
    return PrimalResult(policy=pi, dual_value=L, values=values, theta=sp.theta,
                        delta_estimate=delta, iterations=it)


def fit_aggregated_policy(target: np.ndarray, agg: StateAggregation,
                          floor: float = TOL.logit_floor) -> tuple[SoftmaxPolicy, float]:
    """Cluster-mean fit of ``target`` and its per-state TV error."""
    target = np.asarray(target, dtype=float)
    sums = np.zeros((agg.n_clusters, target.shape[1]))
    np.add.at(sums, agg.cluster_of, target)
    counts = np.bincount(agg.cluster_of, minlength=agg.n_clusters)[:, None]
    means = sums / counts
    sp = SoftmaxPolicy(np.log(np.maximum(means, floor)), agg)
    return sp, policy_tv_epsilon(target, induce_policy(sp))


__all__ = [
    "PgConfig", "PgMode", "PrimalResult", "SoftmaxPolicy", "StateAggregation", "ViResult",
    "exact_lagrangian_max", "exact_policy_gradient", "fit_aggregated_policy", "greedy_policy",
    "induce_policy", "parametric_lagrangian", "pg_lagrangian_max", "reinforce_gradient",
    "value_iteration",
]
