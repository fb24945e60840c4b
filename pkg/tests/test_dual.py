import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmdp_dual.certificates import random_cmdp
from cmdp_dual.core import RewardBounds, reward_bounds
from cmdp_dual.dual import (
    DualConfig,
    DualDescentError,
    PrimalMode,
    cutting_plane_multiplier,
    dual_descent,
    dual_step,
    in_neighborhood,
    iteration_bound,
    neighborhood_bounds,
    read_trace_csv,
    refined_dual_value,
    write_trace_csv,
)
from cmdp_dual.lp import primal_optimum
from cmdp_dual.primal import PgConfig, StateAggregation, exact_lagrangian_max, value_iteration


def test_dual_step_examples():
    np.testing.assert_array_equal(dual_step([0.5, 2.0], [0.0, 0.0], 0.3), [0.5, 2.0])
    np.testing.assert_array_equal(dual_step([0.0, 0.0], [0.1, 3.0], 0.3), [0.0, 0.0])
    assert dual_step([1.0], [-2.0], 0.25)[0] == pytest.approx(1.5)
    with pytest.raises(ValueError):
        dual_step([1.0], [1.0, 2.0], 0.1)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=4), st.floats(-5, 5), st.floats(0.01, 2))
def test_dual_step_stays_nonnegative(lam, slack, eta):
    out = dual_step(lam, [slack] * len(lam), eta)
    assert np.all(out >= 0)


def test_iteration_bound_examples():
    assert iteration_bound([1.0, 2.0], [1.0, 2.0], 0.1, 0.5) == 0.0
    assert iteration_bound([1.0], [0.0], 0.1, 0.5) == pytest.approx(10.0)
    assert iteration_bound([3.0], [1.0], 0.2, 0.1) == pytest.approx(iteration_bound([3.0], [1.0], 0.1, 0.1) / 2)
    with pytest.raises(ValueError):
        iteration_bound([1.0], [0.0], 0.0, 0.5)


def test_neighborhood_bounds_examples():
    b = RewardBounds(B_r0=10.0, B_r=1.0, B=4.0)
    lower, upper = neighborhood_bounds(b, 0.9, 0.5, 0.0, 0.0, 0.1, 2.0, 3.0)
    assert lower == pytest.approx(3.0 - 12.0)
    assert upper == pytest.approx(3.0 + 1.0)
    assert neighborhood_bounds(b, 0.9, 1e-12, 0.0, 1e-12, 0.0, 2.0, 3.0) == pytest.approx((3.0, 3.0))
    slope = neighborhood_bounds(b, 0.9, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0)[1] - \
        neighborhood_bounds(b, 0.9, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0)[1]
    assert slope == pytest.approx(b.B / 2)
    with pytest.raises(ValueError):
        neighborhood_bounds(b, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0)


def test_in_neighborhood_matches_formula():
    assert in_neighborhood(0.0, 1.0, 1.0, 0.1, 0.0, 1e-3)
    assert not in_neighborhood(0.0, 1.0, 2.0, 0.1, 1.0, 1e-3)     # 2(-1) + 0.1 < -0.002
    assert in_neighborhood(0.0, 1.0, 1.05, 0.1, 1.0, 1e-3)        # -0.1 + 0.1 > -0.002


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        DualConfig(eta=0.0)
    with pytest.raises(ValueError):
        DualConfig(epsilon_stop=-1.0)
    cfg = DualConfig(eta=0.2, primal_mode="pg", pg=PgConfig(max_iters=3), lambda0=(1.0,))
    assert DualConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# dual descent


def test_unconstrained_problem_is_a_single_solve():
    cmdp = random_cmdp(0, 4, 2, 0)
    trace = dual_descent(cmdp, DualConfig(k_max=50))
    v_star = float(value_iteration(cmdp, cmdp.rewards[0]).v @ cmdp.initial_dist)
    assert len(trace.records) == 1 and trace.status == "Converged"
    assert trace.records[0].dual_value == pytest.approx(v_star, abs=1e-10)


def test_slack_constraint_keeps_multiplier_at_zero():
    cmdp = random_cmdp(1, 5, 3, 1)
    v1 = exact_lagrangian_max(cmdp, [0.0]).values[1]
    loose = cmdp.replace(thresholds=np.array([v1 - 1.0]))
    trace = dual_descent(loose, DualConfig(k_max=30))
    assert np.all(trace.lambdas == 0.0)
    assert np.ptp(trace.dual_values) == 0.0


def test_lambda0_must_be_valid():
    with pytest.raises(ValueError):
        dual_descent(random_cmdp(0), DualConfig(lambda0=(1.0,)))
    with pytest.raises(ValueError):
        dual_descent(random_cmdp(0), DualConfig(lambda0=(1.0, -1.0)))


@pytest.mark.parametrize("seed", range(4))
def test_exact_trace_invariants(seed):
    cmdp = random_cmdp(seed)
    p_star = primal_optimum(cmdp).p_star
    trace = dual_descent(cmdp, DualConfig(eta=0.05, k_max=300), p_star=p_star)
    assert np.all(trace.lambdas >= 0)
    assert np.all(trace.dual_values >= p_star - 1e-6)
    d_ref, lam_ref = refined_dual_value(cmdp, trace)
    assert p_star - 1e-9 <= d_ref <= trace.best_dual_value + 1e-12
    assert d_ref - p_star <= 1e-4


def test_subgradient_inequality():
    """d(lam) >= d(mu) + (lam - mu)^T slack(mu) for exact evaluations."""
    cmdp = random_cmdp(9)
    rng = np.random.default_rng(0)
    for _ in range(30):
        lam, mu = rng.uniform(0, 3, 2), rng.uniform(0, 3, 2)
        at_mu = exact_lagrangian_max(cmdp, mu)
        d_lam = exact_lagrangian_max(cmdp, lam).dual_value
        assert d_lam >= at_mu.dual_value + (lam - mu) @ at_mu.slacks(cmdp.thresholds) - 1e-9


def test_dual_function_convex_and_above_p_star():
    cmdp = random_cmdp(5, 5, 3, 1)
    p_star = primal_optimum(cmdp).p_star
    grid = np.linspace(0.0, 5.0, 41)
    d = np.array([exact_lagrangian_max(cmdp, [x]).dual_value for x in grid])
    assert np.all(d >= p_star - 1e-9)
    assert np.all(d[:-2] + d[2:] - 2 * d[1:-1] >= -1e-9)


def test_gridworld_exact_gap(gridworld):
    p_star = primal_optimum(gridworld).p_star
    trace = dual_descent(gridworld, DualConfig(eta=0.1, k_max=2000), p_star=p_star)
    tol = 1e-3 * abs(p_star)
    assert trace.best_dual_value - p_star <= tol
    assert refined_dual_value(gridworld, trace)[0] - p_star <= tol
    assert np.all(trace.dual_values >= p_star - 1e-6)


def test_refined_value_monotone_in_run_length():
    cmdp = random_cmdp(3)
    long = dual_descent(cmdp, DualConfig(eta=0.05, k_max=120))
    previous = np.inf
    for k_max in (10, 30, 60, 120):
        short = dual_descent(cmdp, DualConfig(eta=0.05, k_max=k_max))
        np.testing.assert_array_equal(short.lambdas, long.lambdas[:k_max])
        value = refined_dual_value(cmdp, short)[0]
        assert value <= previous + 1e-12
        previous = value


def test_cutting_plane_multiplier_is_nonnegative():
    cmdp = random_cmdp(2)
    trace = dual_descent(cmdp, DualConfig(eta=0.05, k_max=50))
    lam = cutting_plane_multiplier(trace, cmdp.thresholds)
    assert lam.shape == (2,) and np.all(lam >= 0)


def test_stop_on_neighborhood():
    cmdp = random_cmdp(4)
    trace = dual_descent(cmdp, DualConfig(eta=0.05, k_max=500, stop_on_neighborhood=True))
    assert trace.status == "Converged" and len(trace.records) == trace.K + 1


def test_pg_mode_warm_starts_and_records_delta(gridworld):
    cfg = DualConfig(eta=0.1, k_max=20, primal_mode=PrimalMode.PG, pg=PgConfig(max_iters=5))
    trace = dual_descent(gridworld, cfg)
    deltas = np.array([r.delta_estimate for r in trace.records])
    assert np.all(deltas >= -1e-8)
    assert trace.final_theta.shape == (65, 4)
    agg = StateAggregation.single(65)
    coarse = dual_descent(gridworld, cfg, aggregation=agg)
    assert coarse.final_theta.shape == (1, 4)


def test_primal_failures_carry_iteration_index(monkeypatch):
    import cmdp_dual.dual as dual_module

    calls = {"n": 0}

    def failing(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise FloatingPointError("boom")
        return exact_lagrangian_max(*args, **kwargs)

    monkeypatch.setattr(dual_module, "exact_lagrangian_max", failing)
    with pytest.raises(DualDescentError) as info:
        dual_descent(random_cmdp(0), DualConfig(k_max=10))
    assert info.value.k == 2


def test_trace_csv_round_trip():
    cmdp = random_cmdp(6)
    trace = dual_descent(cmdp, DualConfig(k_max=5), p_star=primal_optimum(cmdp).p_star)
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    header = buf.getvalue().splitlines()[0]
    assert header == "k,lambda_0,lambda_1,dual_value,slack_0,slack_1,delta_estimate,gap"
    rows = read_trace_csv(io.StringIO(buf.getvalue()))
    assert len(rows) == 5
    for row, rec in zip(rows, trace.records):
        assert row["dual_value"] == pytest.approx(rec.dual_value, rel=1e-11)
        assert row["lambda_1"] == pytest.approx(rec.lam[1], rel=1e-11, abs=1e-300)


def test_reward_bound_is_a_valid_subgradient_bound():
    cmdp = random_cmdp(7)
    B = reward_bounds(cmdp).B
    trace = dual_descent(cmdp, DualConfig(k_max=50))
    assert max(float(r.slacks @ r.slacks) for r in trace.records) <= B + 1e-9
