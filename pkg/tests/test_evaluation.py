import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmdp_dual.certificates import random_cmdp, random_policy
from cmdp_dual.evaluation import (
    SolveError,
    _solve,
    induced_chain,
    lagrangian,
    occupation_measure,
    policy_from_occupation,
    policy_tv_epsilon,
    policy_values,
    state_occupancy,
    state_values,
    tv_distance,
    value_from_occupation,
)


def truncated_values(cmdp, pi, n_terms=2000):
    """Oracle: sum_t gamma^t p0^T P_pi^t r_pi by explicit iteration."""
    P_pi, r_pi = induced_chain(cmdp, pi)
    dist = cmdp.initial_dist.copy()
    total = np.zeros(cmdp.m + 1)
    for t in range(n_terms):
        total += cmdp.gamma ** t * (r_pi @ dist)
        dist = dist @ P_pi
    return total


def truncated_occupancy(cmdp, pi, n_terms=2000):
    P_pi, _ = induced_chain(cmdp, pi)
    dist = cmdp.initial_dist.copy()
    d = np.zeros(cmdp.n_states)
    for t in range(n_terms):
        d += (1 - cmdp.gamma) * cmdp.gamma ** t * dist
        dist = dist @ P_pi
    return d[:, None] * pi


def test_values_match_truncated_series():
    cmdp = random_cmdp(3, 6, 3, 2)
    pi = random_policy(np.random.default_rng(1), 6, 3)
    np.testing.assert_allclose(policy_values(cmdp, pi), truncated_values(cmdp, pi), atol=1e-10)


def test_occupancy_matches_truncated_series():
    cmdp = random_cmdp(4, 5, 2, 1)
    pi = random_policy(np.random.default_rng(2), 5, 2)
    np.testing.assert_allclose(occupation_measure(cmdp, pi), truncated_occupancy(cmdp, pi), atol=1e-12)


def test_two_state_closed_form(two_state):
    # action 1 in state 0 reaches state 1, whose best reward 2 repeats forever
    pi = np.array([[0.0, 1.0], [1.0, 0.0]])
    v = state_values(two_state, pi)
    assert v[0, 1] == pytest.approx(2.0 / 0.1)
    assert v[0, 0] == pytest.approx(1.0 + 0.9 * 20.0)
    assert policy_values(two_state, pi)[1] == pytest.approx(0.0)


def test_single_reward_table_shape(two_state):
    pi = np.full((2, 2), 0.5)
    assert state_values(two_state, pi, two_state.rewards[0]).shape == (2,)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4), st.floats(0.05, 0.99))
def test_occupancy_is_a_distribution(seed, n_s, n_a, gamma):
    cmdp = random_cmdp(seed, n_s, n_a, 1, gamma=gamma)
    pi = random_policy(np.random.default_rng(seed), n_s, n_a)
    rho = occupation_measure(cmdp, pi)
    assert np.all(rho >= 0)
    assert rho.sum() == pytest.approx(1.0, abs=1e-10)
    d = state_occupancy(cmdp, pi)
    P_pi, _ = induced_chain(cmdp, pi)
    np.testing.assert_allclose(d, (1 - gamma) * cmdp.initial_dist + gamma * P_pi.T @ d, atol=1e-10)


@given(st.integers(0, 10_000), st.floats(0.1, 0.99))
def test_value_occupancy_identity(seed, gamma):
    cmdp = random_cmdp(seed, 5, 3, 2, gamma=gamma)
    pi = random_policy(np.random.default_rng(seed + 1), 5, 3)
    rho = occupation_measure(cmdp, pi)
    v = policy_values(cmdp, pi)
    for i in range(3):
        assert (1 - gamma) * v[i] == pytest.approx(float(np.sum(rho * cmdp.rewards[i])), abs=1e-9)
        assert value_from_occupation(rho, cmdp.rewards[i], gamma) == pytest.approx(v[i], abs=1e-8)


def test_tv_and_epsilon():
    a = np.array([[1.0, 0.0], [0.5, 0.5]])
    b = np.array([[0.0, 1.0], [0.5, 0.5]])
    assert tv_distance(a, b) == 2.0
    assert policy_tv_epsilon(a, b) == 2.0
    assert tv_distance(a, a) == 0.0
    with pytest.raises(ValueError):
        tv_distance(a, a[:1])


def test_lagrangian_matches_definition(two_state):
    pi = np.full((2, 2), 0.5)
    v = policy_values(two_state, pi)
    assert lagrangian(two_state, pi, [3.0]) == pytest.approx(v[0] + 3.0 * (v[1] - 2.0))
    with pytest.raises(ValueError):
        lagrangian(two_state, pi, [-1.0])


def test_policy_recovery_from_occupancy():
    cmdp = random_cmdp(5, 4, 3, 1)
    pi = random_policy(np.random.default_rng(0), 4, 3)
    np.testing.assert_allclose(policy_from_occupation(occupation_measure(cmdp, pi)), pi, atol=1e-10)
    rho = np.array([[0.0, 0.0], [0.2, 0.8]])
    np.testing.assert_allclose(policy_from_occupation(rho), [[0.5, 0.5], [0.2, 0.8]])


def test_invalid_policy_rejected(two_state):
    with pytest.raises(ValueError):
        policy_values(two_state, np.array([[1.0, 1.0], [0.5, 0.5]]))


def test_solve_raises_on_singular_residual():
    with pytest.raises((SolveError, np.linalg.LinAlgError)):
        _solve(np.array([[1.0, 1.0], [1.0, 1.0 + 1e-17]]), np.array([1.0, 2.0]))
