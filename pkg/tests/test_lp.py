import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmdp_dual.certificates import random_cmdp
from cmdp_dual.core import Cmdp
from cmdp_dual.evaluation import occupation_measure, policy_values
from cmdp_dual.lp import (
    LpProblem,
    LpStatus,
    build_occupancy_lp,
    concavity_probe,
    dump_lp,
    load_lp,
    perturbation_value,
    primal_optimum,
    solve_lp,
    vacuous_xi,
)
from cmdp_dual.primal import value_iteration

scipy_optimize = pytest.importorskip("scipy.optimize")


def vertex_max(c, A, b):
    """Oracle for max c^T x, Ax <= b, x >= 0: best feasible basic point."""
    n = c.size
    G = np.vstack([A, -np.eye(n)])
    h = np.concatenate([b, np.zeros(n)])
    best = -np.inf
    for rows in itertools.combinations(range(G.shape[0]), n):
        M = G[list(rows)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, h[list(rows)])
        if np.all(G @ x <= h + 1e-9):
            best = max(best, float(c @ x))
    return best


def _empty_eq(n):
    return np.zeros((0, n)), np.zeros(0)


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4))
def test_simplex_matches_vertex_enumeration(seed, n, k):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=n)
    A = rng.uniform(0.1, 1.0, (k, n))
    b = rng.uniform(0.5, 2.0, k)
    sol = solve_lp(LpProblem(c, *_empty_eq(n), A, b))
    assert sol.optimal
    assert sol.objective == pytest.approx(vertex_max(c, A, b), abs=1e-9)
    # dual feasibility and strong duality
    assert np.all(sol.duals >= -1e-12)
    assert np.all(A.T @ sol.duals >= c - 1e-9)
    assert b @ sol.duals == pytest.approx(sol.objective, abs=1e-9)


@given(st.integers(0, 10_000))
def test_equality_lps_match_scipy(seed):
    rng = np.random.default_rng(seed)
    n, k_eq, k_ub = 6, 2, 3
    x0 = rng.uniform(0.1, 1.0, n)         # feasible point by construction
    A_eq = rng.normal(size=(k_eq, n))
    A_ub = rng.normal(size=(k_ub, n))
    b_eq, b_ub = A_eq @ x0, A_ub @ x0 + 0.1
    c = rng.normal(size=n)
    bound = np.ones((1, n))                # keep it bounded
    A_ub, b_ub = np.vstack([A_ub, bound]), np.append(b_ub, x0.sum() + 1.0)
    sol = solve_lp(LpProblem(c, A_eq, b_eq, A_ub, b_ub))
    ref = scipy_optimize.linprog(-c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, method="highs")
    assert sol.optimal and ref.status == 0
    assert sol.objective == pytest.approx(-ref.fun, abs=1e-8)
    assert sol.primal_residual <= 1e-8


def test_infeasible_and_unbounded():
    inf = solve_lp(LpProblem(np.ones(2), np.zeros((0, 2)), np.zeros(0), np.array([[1.0, 1.0]]), np.array([-1.0])))
    assert inf.status is LpStatus.INFEASIBLE
    unb = solve_lp(LpProblem(np.array([1.0, 0.0]), np.zeros((0, 2)), np.zeros(0),
                             np.array([[0.0, 1.0]]), np.array([1.0])))
    assert unb.status is LpStatus.UNBOUNDED


def test_degenerate_lp_terminates():
    # classic cycling example for largest-coefficient rules
    c = np.array([10.0, -57.0, -9.0, -24.0])
    A = np.array([[0.5, -5.5, -2.5, 9.0], [0.5, -1.5, -0.5, 1.0], [1.0, 0.0, 0.0, 0.0]])
    b = np.array([0.0, 0.0, 1.0])
    sol = solve_lp(LpProblem(c, *_empty_eq(4), A, b))
    assert sol.optimal and sol.objective == pytest.approx(1.0)


def test_redundant_equalities():
    A_eq = np.array([[1.0, 1.0], [2.0, 2.0]])
    sol = solve_lp(LpProblem(np.array([1.0, 2.0]), A_eq, np.array([1.0, 2.0]), np.zeros((0, 2)), np.zeros(0)))
    assert sol.optimal and sol.objective == pytest.approx(2.0)


def test_dump_round_trip(gridworld):
    lp = build_occupancy_lp(random_cmdp(0, 3, 2, 1))
    back = load_lp(dump_lp(lp))
    for name in ("c", "A_eq", "b_eq", "A_ub", "b_ub"):
        np.testing.assert_array_equal(getattr(back, name), getattr(lp, name))
    assert dump_lp(lp).startswith("maximize 6\n")


def test_lp_problem_validation():
    with pytest.raises(ValueError):
        LpProblem(np.ones(2), np.ones((1, 2)), np.ones(2), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        LpProblem(np.array([np.inf, 1.0]), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros(0))


# ---------------------------------------------------------------------------
# occupancy LP


def gridworld_closed_form(gamma=0.95):
    """Optimal mix of the shortest unsafe route (7 moves) and the safe
    detour (13 moves) that spends exactly the visitation budget."""
    v_safe = -sum(gamma ** t for t in range(13)) + 10 * gamma ** 13
    v_unsafe = -sum(gamma ** t for t in range(7)) + 10 * gamma ** 7
    cost = gamma ** 3                      # unsafe bridge reached after 3 moves
    alpha = 0.01 / (1 - gamma) / cost
    p_star = alpha * v_unsafe + (1 - alpha) * v_safe
    return p_star, (v_unsafe - v_safe) / cost


def test_gridworld_lp_matches_closed_form(gridworld):
    p_ref, lam_ref = gridworld_closed_form()
    opt = primal_optimum(gridworld)
    assert opt.status is LpStatus.OPTIMAL
    assert opt.p_star == pytest.approx(p_ref, abs=1e-9)
    assert opt.lambda_lp[0] == pytest.approx(lam_ref, abs=1e-7)
    # the LP occupation measure reproduces its own policy's values
    v = policy_values(gridworld, opt.policy)
    assert v[0] == pytest.approx(opt.p_star, abs=1e-8)
    assert v[1] >= gridworld.thresholds[0] - 1e-8


@given(st.integers(0, 10_000))
def test_lp_feasible_for_slater_instances(seed):
    cmdp = random_cmdp(seed)
    opt = primal_optimum(cmdp)
    assert opt.status is LpStatus.OPTIMAL
    v = policy_values(cmdp, opt.policy)
    assert v[0] == pytest.approx(opt.p_star, abs=1e-8)
    assert np.all(v[1:] >= cmdp.thresholds - 1e-8)
    np.testing.assert_allclose(occupation_measure(cmdp, opt.policy), opt.rho, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_unconstrained_lp_equals_value_iteration(seed):
    cmdp = random_cmdp(seed, 5, 3, 0)
    vi = value_iteration(cmdp, cmdp.rewards[0])
    assert primal_optimum(cmdp).p_star == pytest.approx(float(vi.v @ cmdp.initial_dist), abs=1e-7)


def test_thresholds_above_reach_are_infeasible(gridworld):
    opt = primal_optimum(gridworld.replace(thresholds=np.array([5.0])))
    assert opt.status is LpStatus.INFEASIBLE and opt.p_star == -np.inf
    assert perturbation_value(gridworld, [100.0]) == -np.inf


def test_perturbation_monotone_and_concave():
    cmdp = random_cmdp(1)
    xs = np.linspace(-0.5, 0.2, 8)
    vals = [perturbation_value(cmdp, [x, 0.0]) for x in xs]
    finite = [v for v in vals if np.isfinite(v)]
    assert all(a >= b - 1e-10 for a, b in zip(finite, finite[1:]))
    assert concavity_probe(cmdp, [0.0, 0.0], [0.0, 0.0], 0.5) == pytest.approx(0.0, abs=1e-12)
    assert concavity_probe(cmdp, [-0.3, 0.1], [0.05, -0.2], 0.25) >= -1e-9
    assert concavity_probe(cmdp, [100.0, 0.0], [0.0, 0.0], 0.5) == np.inf
    with pytest.raises(ValueError):
        concavity_probe(cmdp, [0.0, 0.0], [0.0, 0.0], 1.0)


def test_vacuous_xi_relaxes_everything():
    cmdp = random_cmdp(2)
    xi = vacuous_xi(cmdp)
    unconstrained = primal_optimum(Cmdp(cmdp.transition, cmdp.initial_dist, cmdp.rewards[:1], [], cmdp.gamma))
    assert perturbation_value(cmdp, xi) == pytest.approx(unconstrained.p_star, abs=1e-8)


def test_wrong_perturbation_length():
    with pytest.raises(ValueError):
        build_occupancy_lp(random_cmdp(0), [0.0])
