"""Exact policy evaluation: discounted values, occupation measures and the
Lagrangian, all through dense linear solves."""
from __future__ import annotations

import numpy as np

from .core import Cmdp, _check_lambda, check_policy
from .tolerances import TOL


class SolveError(RuntimeError):
    pass


def _solve(A: np.ndarray, b: np.ndarray, tol: float = TOL.solve, max_refine: int = 3) -> np.ndarray:
    """Dense LU solve with iterative refinement until ``|Ax - b|_inf <= tol``
    (scaled by ``max(1, |b|_inf)``)."""
    x = np.linalg.solve(A, b)
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    for _ in range(max_refine):
        res = b - A @ x
        if np.abs(res).max(initial=0.0) <= tol * scale:
            return x
        x = x + np.linalg.solve(A, res)
    res = b - A @ x
    if np.abs(res).max(initial=0.0) > tol * scale:
        raise SolveError(f"linear solve residual {np.abs(res).max():.3e} exceeds {tol:.1e}")
    return x


def induced_chain(cmdp: Cmdp, policy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``P_pi[s, s']`` and ``r_pi[i, s]`` for every reward table."""
    policy = check_policy(policy, cmdp.n_states, cmdp.n_actions)
    P_pi = np.einsum("sa,sat->st", policy, cmdp.transition)
    r_pi = np.einsum("sa,isa->is", policy, cmdp.rewards)
    return P_pi, r_pi


def state_values(cmdp: Cmdp, policy: np.ndarray, rewards: np.ndarray | None = None) -> np.ndarray:
    """Per-state values ``v_i`` solving ``(I - gamma P_pi) v_i = r_{i,pi}``.

    ``rewards`` defaults to all m+1 tables (result shape ``(m+1, S)``); a
    single ``(S, A)`` table gives shape ``(S,)``.
    """
    policy = check_policy(policy, cmdp.n_states, cmdp.n_actions)
    P_pi = np.einsum("sa,sat->st", policy, cmdp.transition)
    R = cmdp.rewards if rewards is None else np.asarray(rewards, dtype=float)
    r_pi = np.einsum("sa,...sa->...s", policy, R)
    A = np.eye(cmdp.n_states) - cmdp.gamma * P_pi
    return _solve(A, r_pi.T).T


def policy_values(cmdp: Cmdp, policy: np.ndarray) -> np.ndarray:
    """``(V_0, ..., V_m)`` from the initial distribution."""
    return state_values(cmdp, policy) @ cmdp.initial_dist


def state_occupancy(cmdp: Cmdp, policy: np.ndarray) -> np.ndarray:
    """Normalized discounted state distribution ``d = (1-g) p0 + g P_pi^T d``."""
    policy = check_policy(policy, cmdp.n_states, cmdp.n_actions)
    P_pi = np.einsum("sa,sat->st", policy, cmdp.transition)
    A = np.eye(cmdp.n_states) - cmdp.gamma * P_pi.T
    d = _solve(A, (1.0 - cmdp.gamma) * cmdp.initial_dist)
    return np.clip(d, 0.0, None)


def occupation_measure(cmdp: Cmdp, policy: np.ndarray) -> np.ndarray:
    policy = check_policy(policy, cmdp.n_states, cmdp.n_actions)
    return state_occupancy(cmdp, policy)[:, None] * policy


def value_from_occupation(rho: np.ndarray, reward: np.ndarray, gamma: float) -> float:
    rho, reward = np.asarray(rho, dtype=float), np.asarray(reward, dtype=float)
    if rho.shape != reward.shape:
        raise ValueError(f"occupation shape {rho.shape} != reward shape {reward.shape}")
    return float(np.sum(rho * reward) / (1.0 - gamma))


def tv_distance(rho1: np.ndarray, rho2: np.ndarray) -> float:
    """L1 distance between occupation measures (not halved)."""
    rho1, rho2 = np.asarray(rho1), np.asarray(rho2)
    if rho1.shape != rho2.shape:
        raise ValueError(f"shape mismatch {rho1.shape} vs {rho2.shape}")
    return float(np.abs(rho1 - rho2).sum())


def policy_tv_epsilon(pi: np.ndarray, pi_theta: np.ndarray) -> float:
    """``max_s sum_a |pi(a|s) - pi_theta(a|s)|``."""
    pi, pi_theta = np.asarray(pi), np.asarray(pi_theta)
    if pi.shape != pi_theta.shape:
        raise ValueError(f"shape mismatch {pi.shape} vs {pi_theta.shape}")
    return float(np.abs(pi - pi_theta).sum(axis=1).max())


def lagrangian_from_values(values: np.ndarray, thresholds: np.ndarray, lam) -> float:
    lam = np.asarray(lam, dtype=float).reshape(-1)
    return float(values[0] + lam @ (values[1:] - thresholds))


def lagrangian(cmdp: Cmdp, policy: np.ndarray, lam) -> float:
    """``V_0(pi) + sum_i lambda_i (V_i(pi) - c_i)``."""
    lam = _check_lambda(cmdp, lam)
    return lagrangian_from_values(policy_values(cmdp, policy), cmdp.thresholds, lam)


def policy_from_occupation(rho: np.ndarray) -> np.ndarray:
    """Normalize each state's row of ``rho``.  States with zero marginal
    (unreachable) get a uniform row."""
    rho = np.clip(np.asarray(rho, dtype=float), 0.0, None)
    marginal = rho.sum(axis=1, keepdims=True)
    n_a = rho.shape[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(marginal > 0, rho / np.where(marginal > 0, marginal, 1.0), 1.0 / n_a)
    return pi
