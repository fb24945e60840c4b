"""Numerical certificates for the duality results, plus a generator of
strictly feasible random CMDPs.

Each ``check_*`` function returns a :class:`CertificateReport` whose
``worst_margin`` is the most-violating slack (positive means the claimed
inequality holds with room to spare).
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Cmdp, reward_bounds
from .dual import (
    DualConfig,
    PrimalMode,
    dual_descent,
    in_neighborhood,
    iteration_bound,
    neighborhood_bounds,
    refined_dual_value,
)
from .evaluation import lagrangian, occupation_measure, policy_values, tv_distance
from .lp import LpStatus, concavity_probe, primal_optimum
from .primal import (
    PgConfig,
    StateAggregation,
    exact_lagrangian_max,
    SoftmaxPolicy,
    fit_aggregated_policy,
    induce_policy,
    pg_lagrangian_max,
)


def _policy(theta: np.ndarray, agg: StateAggregation) -> np.ndarray:
    return induce_policy(SoftmaxPolicy(theta, agg))


@dataclass
class CertificateReport:
    name: str
    instances: int
    worst_margin: float
    tolerance: float = 0.0
    details: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.worst_margin >= -self.tolerance

    def to_dict(self) -> dict:
        return _jsonable({
            "name": self.name, "instances": self.instances, "worst_margin": self.worst_margin,
            "tolerance": self.tolerance, "passed": self.passed, "details": self.details,
        })

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.name}: {verdict} over {self.instances} instance(s), worst margin {self.worst_margin:.3e}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def merge_reports(name: str, reports: list[CertificateReport]) -> CertificateReport:
    """Combine per-instance reports, keeping instance order."""
    if not reports:
        return CertificateReport(name, 0, math.inf)
    details = []
    for i, r in enumerate(reports):
        details.extend({"instance": i, **d} for d in r.details)
    return CertificateReport(name, sum(r.instances for r in reports),
                             min(r.worst_margin for r in reports),
                             max(r.tolerance for r in reports), details)


def worker_count() -> int:
    env = os.environ.get("CMDP_DUAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"CMDP_DUAL_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def map_instances(fn, items) -> list:
    """``[fn(x) for x in items]`` on a thread pool capped by CMDP_DUAL_THREADS."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# instance generation


def random_cmdp(seed: int, n_states: int = 5, n_actions: int = 3, m: int = 2,
                slater_margin: float = 0.05, gamma: float = 0.9) -> Cmdp:
    """Random CMDP whose thresholds sit ``slater_margin`` below the values of
    a sampled random policy, so that policy is strictly feasible."""
    if min(n_states, n_actions) < 1 or m < 0:
        raise ValueError("sizes must be at least 1 and m nonnegative")
    if slater_margin <= 0:
        raise ValueError("slater_margin must be positive")
    rng = np.random.default_rng(seed)
    P = rng.random((n_states, n_actions, n_states))
    P /= P.sum(axis=2, keepdims=True)
    p0 = rng.random(n_states)
    p0 /= p0.sum()
    R = rng.uniform(-1.0, 1.0, (m + 1, n_states, n_actions))
    pi = random_policy(rng, n_states, n_actions)
    cmdp = Cmdp(P, p0, R, np.zeros(m), gamma)
    values = policy_values(cmdp, pi)
    return cmdp.replace(thresholds=values[1:] - slater_margin)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    pi = rng.random((n_states, n_actions))
    return pi / pi.sum(axis=1, keepdims=True)


def random_aggregation(rng: np.random.Generator, n_states: int) -> StateAggregation:
    k = int(rng.integers(1, n_states + 1))
    return StateAggregation.from_map(rng.integers(0, k, n_states))


def _require_feasible(cmdp: Cmdp):
    opt = primal_optimum(cmdp)
    if opt.status is not LpStatus.OPTIMAL:
        raise ValueError(f"instance is not feasible (LP status {opt.status.value})")
    return opt


# ---------------------------------------------------------------------------
# zero duality gap


def check_zero_gap(cmdp: Cmdp, eta: float = 0.05, k_max: int = 5000, tol: float = 1e-4) -> CertificateReport:
    """``|D* - P*| <= tol`` with D* from exact-mode dual descent and P* from
    the occupancy LP."""
    opt = _require_feasible(cmdp)
    trace = dual_descent(cmdp, DualConfig(eta=eta, k_max=k_max), p_star=opt.p_star)
    d_star, lam = refined_dual_value(cmdp, trace)
    gap = d_star - opt.p_star
    return CertificateReport("zero-gap", 1, tol - abs(gap), 0.0, [{
        "p_star": opt.p_star, "d_star": d_star, "gap": gap, "lambda": lam,
        "lambda_lp": opt.lambda_lp, "iterations": len(trace.records),
    }])


def zero_gap_suite(seeds=range(20), n_states: int = 5, n_actions: int = 3, m: int = 2,
                   eta: float = 0.05, k_max: int = 5000, tol: float = 1e-4) -> CertificateReport:
    def one(seed):
        return check_zero_gap(random_cmdp(seed, n_states, n_actions, m), eta, k_max, tol)
    return merge_reports("zero-gap", map_instances(one, seeds))


# ---------------------------------------------------------------------------
# occupation-measure perturbation


def check_lemma1(cmdp: Cmdp, pi: np.ndarray, agg: StateAggregation, tol: float = 1e-9) -> CertificateReport:
    """``|rho - rho_theta|_1 <= eps / (1 - gamma)`` for the cluster-mean fit."""
    sp, eps = fit_aggregated_policy(pi, agg)
    tv = tv_distance(occupation_measure(cmdp, pi), occupation_measure(cmdp, induce_policy(sp)))
    bound = eps / (1.0 - cmdp.gamma)
    return CertificateReport("lemma1", 1, bound - tv, tol, [{"epsilon": eps, "tv": tv, "bound": bound}])


def lemma1_suite(n: int = 50, seed: int = 0, n_states: int = 6, n_actions: int = 3,
                 gamma: float = 0.9) -> CertificateReport:
    children = np.random.SeedSequence(seed).spawn(n)

    def one(child):
        rng = np.random.default_rng(child)
        cmdp = random_cmdp(int(rng.integers(2**31)), n_states, n_actions, 1, gamma=gamma)
        return check_lemma1(cmdp, random_policy(rng, n_states, n_actions), random_aggregation(rng, n_states))
    return merge_reports("lemma1", map_instances(one, children))


# ---------------------------------------------------------------------------
# concavity of the perturbation function


def check_concavity(cmdp: Cmdp, n_probes: int = 200, seed: int = 0, tol: float = 1e-7) -> CertificateReport:
    """Midpoint-style concavity probes of ``P(xi)``; probes with an
    infeasible endpoint hold trivially and are counted as passes."""
    rng = np.random.default_rng(seed)
    radius = reward_bounds(cmdp).B_r / (1.0 - cmdp.gamma)
    details, worst = [], math.inf
    for _ in range(n_probes):
        xi1 = rng.uniform(-radius, radius, cmdp.m)
        xi2 = rng.uniform(-radius, radius, cmdp.m)
        mu = float(rng.choice([0.25, 0.5, 0.75]))
        margin = concavity_probe(cmdp, xi1, xi2, mu)
        worst = min(worst, margin)
        details.append({"mu": mu, "margin": margin, "trivial": not math.isfinite(margin)})
    return CertificateReport("concavity", n_probes, worst, tol, details)


def concavity_suite(n_instances: int = 5, n_probes: int = 200, seed: int = 0,
                    n_states: int = 5, n_actions: int = 3, m: int = 2) -> CertificateReport:
    def one(i):
        return check_concavity(random_cmdp(seed + i, n_states, n_actions, m), n_probes, seed + i)
    return merge_reports("concavity", map_instances(one, range(n_instances)))


# ---------------------------------------------------------------------------
# parametrized dual


class InClassMaximizer:
    """Multi-start estimate of ``d_theta(lambda) = max_theta L(theta, lambda)``.

    Identity aggregations are maximized exactly.  Otherwise the softmax
    class is climbed from the warm start, from caller-supplied logits, and
    from the best ``n_pool_starts`` cluster-mean fits in a pool of
    reference policies (the exact greedy policies met so far plus any
    supplied ones).  The best local maximum is kept and cached per
    multiplier.
    """

    def __init__(self, cmdp: Cmdp, agg: StateAggregation, pg: PgConfig | None = None,
                 reference=(), n_pool_starts: int = 2):
        self.cmdp = cmdp
        self.agg = agg
        self.pg = pg or PgConfig(step_size=1.0, max_iters=100, measure_delta=False)
        self.n_pool_starts = n_pool_starts
        self.cache: dict[tuple, tuple[float, np.ndarray, np.ndarray]] = {}
        self._warm = np.zeros((agg.n_clusters, cmdp.n_actions))
        self._pool: dict[bytes, np.ndarray] = {}
        for pi in reference:
            self._add_to_pool(pi)

    def _add_to_pool(self, policy: np.ndarray) -> np.ndarray:
        theta = fit_aggregated_policy(policy, self.agg)[0].theta
        self._pool.setdefault(np.round(theta, 9).tobytes(), theta)
        return theta

    def _pool_starts(self, lam: np.ndarray) -> list[np.ndarray]:
        scored = sorted(self._pool.values(), key=lambda th: -lagrangian(self.cmdp, _policy(th, self.agg), lam))
        return scored[: self.n_pool_starts]

    def __call__(self, lam, extra_starts=()) -> tuple[float, np.ndarray, np.ndarray]:
        """``(value, theta, values)`` of the best in-class policy found."""
        lam = np.asarray(lam, dtype=float)
        key = tuple(np.round(lam, 12))
        cached = self.cache.get(key)
        if cached is not None and (self.agg.is_identity or not extra_starts):
            return cached
        if cached is None:
            exact = exact_lagrangian_max(self.cmdp, lam)
            fitted = self._add_to_pool(exact.policy)
            if self.agg.is_identity:
                self.cache[key] = (exact.dual_value, fitted, exact.values)
                return self.cache[key]
            starts = [self._warm, *self._pool_starts(lam), *extra_starts]
        else:
            starts = [cached[1], *extra_starts]
        best = cached
        for theta0 in starts:
            res = pg_lagrangian_max(self.cmdp, lam, theta0, self.pg, self.agg)
            if best is None or res.dual_value > best[0]:
                best = (res.dual_value, res.theta, res.values)
        self.cache[key] = best
        self._warm = best[1]
        return best

    @property
    def evaluated(self) -> list[np.ndarray]:
        return [np.array(k) for k in self.cache]

    def best(self) -> tuple[float, np.ndarray]:
        key = min(self.cache, key=lambda k: self.cache[k][0])
        return self.cache[key][0], np.array(key)


def search_parametric_dual(oracle: InClassMaximizer, lam0, n_steps: int = 25,
                           lam_cap: float = 1e4) -> tuple[float, np.ndarray]:
    """Minimize the convex function ``d_theta`` over ``lambda >= 0``.

    With one constraint this bisects on the sign of the maximizer's slack
    (a subgradient).  With several it takes projected subgradient steps of
    diminishing length.
    """
    cmdp = oracle.cmdp
    lam0 = np.asarray(lam0, dtype=float)
    if cmdp.m == 0:
        oracle(np.zeros(0))
        return oracle.best()
    if cmdp.m == 1:
        slack = lambda lam: oracle(np.array([lam]))[2][1] - cmdp.thresholds[0]  # noqa: E731
        lo, hi = 0.0, max(1.0, 2.0 * float(lam0[0]))
        if slack(lo) < 0.0:
            while slack(hi) < 0.0 and hi < lam_cap:
                lo, hi = hi, 2.0 * hi
            for _ in range(n_steps):
                mid = 0.5 * (lo + hi)
                if slack(mid) < 0.0:
                    lo = mid
                else:
                    hi = mid
        return oracle.best()
    lam = lam0.copy()
    value, _, values = oracle(lam)
    scale = 1.0 + float(np.abs(lam0).sum())
    for k in range(n_steps):
        g = values[1:] - cmdp.thresholds
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            break
        lam = np.minimum(np.maximum(0.0, lam - scale / math.sqrt(k + 1.0) * g / norm), lam_cap)
        value, _, values = oracle(lam)
    return oracle.best()


@dataclass
class ParametricGap:
    n_clusters: int
    epsilon: float
    p_star: float
    d_theta: float
    lam_theta: np.ndarray
    lower: float
    lambda_eps: np.ndarray | None
    vacuous: bool

    @property
    def gap(self) -> float:
        return self.p_star - self.d_theta

    def margin(self, upper_tol: float = 1e-4) -> float:
        upper = self.p_star + upper_tol - self.d_theta
        return upper if self.vacuous else min(upper, self.d_theta - self.lower)

    def to_dict(self) -> dict:
        return {
            "n_clusters": self.n_clusters, "epsilon": self.epsilon, "p_star": self.p_star,
            "d_theta": self.d_theta, "lambda_theta": self.lam_theta, "gap": self.gap,
            "bound_lower": self.lower, "lambda_eps": self.lambda_eps, "vacuous": self.vacuous,
        }


def _epsilon_and_lower(cmdp: Cmdp, opt, agg: StateAggregation, reference=()):
    eps = max(fit_aggregated_policy(pi, agg)[1] for pi in (opt.policy, *reference))
    bounds = reward_bounds(cmdp)
    xi = np.full(cmdp.m, bounds.B_r * eps / (1.0 - cmdp.gamma))
    perturbed = primal_optimum(cmdp, xi)
    if perturbed.status is not LpStatus.OPTIMAL:
        return eps, -math.inf, None, True
    lam_eps = perturbed.lambda_lp
    lower = opt.p_star - (bounds.B_r0 + float(np.abs(lam_eps).sum()) * bounds.B_r) * eps / (1.0 - cmdp.gamma)
    return eps, lower, lam_eps, False


def parametric_sweep(cmdp: Cmdp, aggregations: list[StateAggregation], n_steps: int = 25,
                     pg: PgConfig | None = None, reference=()) -> list[ParametricGap]:
    """In-class dual optimum for a nested family of aggregations.

    Every class is searched on its own, then all classes are re-evaluated
    on the union of visited multipliers, coarsest first, each finer class
    also starting from the lifted logits of the next coarser one.  The
    estimates therefore dominate pointwise along the nesting and the
    reported gaps are ordered by coarseness.
    """
    opt = _require_feasible(cmdp)
    order = sorted(range(len(aggregations)), key=lambda i: aggregations[i].n_clusters)
    pool = (opt.policy, *reference)
    oracles = {i: InClassMaximizer(cmdp, aggregations[i], pg, pool) for i in order}
    lam0 = opt.lambda_lp if opt.lambda_lp is not None else np.zeros(cmdp.m)
    for i in order:
        oracles[i](lam0)
        search_parametric_dual(oracles[i], lam0, n_steps)
    common = {tuple(k) for o in oracles.values() for k in o.cache}
    for key in sorted(common):
        lam = np.array(key)
        prev = None
        for i in order:
            extra = ()
            if prev is not None:
                try:
                    extra = (aggregations[prev].lift(oracles[prev](lam)[1], aggregations[i]),)
                except ValueError:
                    extra = ()
            oracles[i](lam, extra)
            prev = i
    out: list[ParametricGap | None] = [None] * len(aggregations)
    for i in order:
        d_theta, lam_theta = oracles[i].best()
        eps, lower, lam_eps, vacuous = _epsilon_and_lower(cmdp, opt, aggregations[i], reference)
        out[i] = ParametricGap(aggregations[i].n_clusters, eps, opt.p_star, d_theta, lam_theta,
                               lower, lam_eps, vacuous)
    return out


def check_parametric_gap(cmdp: Cmdp, agg: StateAggregation, tol: float = 1e-6,
                         upper_tol: float = 1e-4, n_steps: int = 25) -> CertificateReport:
    """``P* + upper_tol >= D*_theta >= P* - (B_r0 + |lambda_eps|_1 B_r) eps / (1-gamma)``."""
    result = parametric_sweep(cmdp, [agg], n_steps)[0]
    return CertificateReport("parametric-gap", 1, result.margin(upper_tol), tol, [result.to_dict()])


# ---------------------------------------------------------------------------
# convergence of dual descent


@dataclass
class ReferenceMultiplier:
    lam: np.ndarray
    dual_value: float


def reference_multiplier(cmdp: Cmdp, cfg: DualConfig) -> ReferenceMultiplier:
    """Long exact-mode run (ten times the iterations at a tenth of the step),
    polished by the cutting-plane refinement."""
    ref_cfg = DualConfig(eta=cfg.eta / 10.0, k_max=cfg.k_max * 10, lambda0=cfg.lambda0)
    trace = dual_descent(cmdp, ref_cfg)
    value, lam = refined_dual_value(cmdp, trace)
    return ReferenceMultiplier(np.asarray(lam, dtype=float), value)


def check_convergence(cmdp: Cmdp, cfg: DualConfig, aggregation: StateAggregation | None = None,
                      reference: ReferenceMultiplier | None = None, tol: float = 1e-6,
                      subgradient_bound: float | None = None, eps_param: float | None = None,
                      trace=None) -> CertificateReport:
    """Iteration-count and neighborhood certificates for one run.

    ``K_observed`` is the first iterate with
    ``2 (delta_k + d(lambda_ref) - d_k) + eta B > -2 eps_acc``.  Since ``d`` is
    convex, the standard subgradient argument bounds it by
    ``|lambda_0 - lambda_ref|^2 / (2 eta eps_acc)`` for any reference point.
    ``B`` defaults to the largest squared slack norm observed along the run,
    which is all the argument needs.  Containment in the neighborhood
    interval is checked at ``K_observed`` and at the last iterate.
    """
    opt = _require_feasible(cmdp)
    agg = aggregation or StateAggregation.identity(cmdp.n_states)
    if trace is None:
        trace = dual_descent(cmdp, cfg, p_star=opt.p_star, aggregation=agg)
    if reference is None:
        reference = reference_multiplier(cmdp, cfg)
    records = trace.records
    slack_sq = np.array([float(r.slacks @ r.slacks) for r in records])
    B = float(slack_sq.max()) if subgradient_bound is None else subgradient_bound
    exact_mode = cfg.primal_mode is PrimalMode.EXACT
    delta = np.array([0.0 if exact_mode else max(r.delta_estimate, 0.0) for r in records])
    # d(lambda_k): exact in exact mode; achieved value plus measured delta otherwise
    d_exact = np.array([r.dual_value + (0.0 if exact_mode else r.delta_estimate) for r in records])
    eps_acc = cfg.epsilon_stop
    K_obs = next((k for k, r in enumerate(records)
                  if in_neighborhood(delta[k], reference.dual_value, d_exact[k], cfg.eta, B, eps_acc)), None)
    lam0 = records[0].lam
    K_bound = iteration_bound(lam0, reference.lam, cfg.eta, eps_acc)
    if eps_param is None:
        eps_param = 0.0 if agg.is_identity else max(fit_aggregated_policy(opt.policy, agg)[1], 0.0)
    if eps_param > 0:
        _, _, lam_eps, vacuous = _epsilon_and_lower(cmdp, opt, agg)
        lam_eps_norm = math.inf if vacuous else float(np.abs(lam_eps).sum())
    else:
        lam_eps_norm = float(np.abs(opt.lambda_lp).sum())
    bounds = reward_bounds(cmdp)
    details = {"K_observed": K_obs, "K_bound": K_bound, "B": B, "eta": cfg.eta, "eps_acc": eps_acc,
               "eps_param": eps_param, "lambda_ref": reference.lam, "d_ref": reference.dual_value,
               "p_star": opt.p_star}
    margins = []
    if K_obs is None:
        margins.append(-math.inf)
    else:
        margins.append(K_bound + 1.0 - K_obs)
    for label, k in (("K", K_obs), ("terminal", len(records) - 1)):
        if k is None:
            continue
        with np.errstate(invalid="ignore"):
            lower, upper = neighborhood_bounds(bounds, cmdp.gamma, cfg.eta, float(delta[k]), eps_acc,
                                               eps_param, lam_eps_norm, opt.p_star)
        if math.isnan(lower):
            lower = -math.inf
        # d_theta <= d, and the achieved Lagrangian is <= d_theta
        d_upper = d_exact[k]
        d_lower = d_exact[k] if agg.is_identity else records[k].dual_value
        margins.append(min(upper - d_upper, d_lower - lower))
        details[f"{label}_d"] = d_upper
        details[f"{label}_bounds"] = (lower, upper)
    return CertificateReport("convergence", 1, min(margins), tol, [details])


def convergence_suite(n: int = 10, seed: int = 0, cfg: DualConfig | None = None,
                      n_states: int = 5, n_actions: int = 3, m: int = 2) -> CertificateReport:
    cfg = cfg or DualConfig(eta=0.05, k_max=500, epsilon_stop=1e-3)

    def one(i):
        return check_convergence(random_cmdp(seed + i, n_states, n_actions, m), cfg)
    return merge_reports("convergence", map_instances(one, range(n)))


CERTIFICATES = {
    "zero-gap": zero_gap_suite,
    "lemma1": lemma1_suite,
    "concavity": concavity_suite,
    "convergence": convergence_suite,
}
