"""Command-line front end for the constrained-MDP dual solver.

Subcommands validate models, solve by dual descent, query the LP oracle,
sweep aggregation coarseness and run certificates.

Exit codes: 0 success, 1 validation/certificate failure or infeasible
problem, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import certificates as certs
from .core import (
    Cmdp,
    GridworldConfig,
    block_aggregation_map,
    build_gridworld,
    greedy_path,
    gridworld_problems,
    render_policy,
    validate,
)
from .dual import DualConfig, PrimalMode, dual_descent, refined_dual_value, write_trace_csv
from .lp import LpStatus, primal_optimum
from .primal import StateAggregation

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments, unreadable or ill-formed input files."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """One experiment.  ``problem`` holds exactly one of the keys
    ``gridworld`` (inline dict or path), ``model`` (path) or ``random``
    (generator keyword arguments)."""

    problem: dict = field(default_factory=lambda: {"gridworld": {}})
    solver: DualConfig = field(default_factory=DualConfig)
    aggregation: str | int = "identity"   # "identity", a block size, or a map path
    output_dir: str = "out"
    emit_svg: bool = False
    blocks: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        sources = [k for k in ("gridworld", "model", "random") if k in self.problem]
        if len(sources) != 1 or len(self.problem) != 1:
            raise UsageError("problem must name exactly one of gridworld, model, random")

    @property
    def source(self) -> str:
        return next(iter(self.problem))

    def to_dict(self) -> dict:
        return {"problem": self.problem, "solver": self.solver.to_dict(),
                "aggregation": self.aggregation, "output_dir": self.output_dir,
                "emit_svg": self.emit_svg, "blocks": list(self.blocks)}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        unknown = set(doc) - {"problem", "solver", "aggregation", "output_dir", "emit_svg", "blocks"}
        if unknown:
            raise UsageError(f"unknown config fields: {sorted(unknown)}")
        if "solver" in doc:
            doc["solver"] = DualConfig.from_dict(doc["solver"])
        if "blocks" in doc:
            doc["blocks"] = tuple(int(b) for b in doc["blocks"])
        return cls(**doc)


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def load_config(args) -> ExperimentConfig:
    """Config file (if any) overridden by command-line flags."""
    try:
        cfg = ExperimentConfig.from_dict(_read_json(args.config)) if args.config else ExperimentConfig()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    solver = cfg.solver
    try:
        if args.eta is not None:
            solver = replace(solver, eta=args.eta)
        if args.kmax is not None:
            solver = replace(solver, k_max=args.kmax)
        if args.mode is not None:
            solver = replace(solver, primal_mode=PrimalMode(args.mode))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg.solver = solver
    if args.seed is not None:
        if cfg.source == "random":
            cfg.problem = {"random": {**cfg.problem["random"], "seed": args.seed}}
        cfg.solver = replace(cfg.solver, pg=replace(cfg.solver.pg, rng_seed=args.seed))
    if args.block is not None:
        cfg.aggregation = args.block
    if getattr(args, "blocks", None):
        cfg.blocks = tuple(args.blocks)
    if args.out is not None:
        cfg.output_dir = args.out
    if args.svg:
        cfg.emit_svg = True
    return cfg


def build_problem(cfg: ExperimentConfig) -> tuple[Cmdp, GridworldConfig | None]:
    definition = cfg.problem[cfg.source]
    try:
        if cfg.source == "gridworld":
            grid = GridworldConfig.from_dict(_read_json(definition) if isinstance(definition, str) else definition)
            problems = gridworld_problems(grid)
            if problems:
                raise UsageError("invalid gridworld: " + "; ".join(problems))
            return build_gridworld(grid), grid
        if cfg.source == "model":
            return Cmdp.from_dict(_read_json(definition)), None
        definition = dict(definition)
        seed = int(definition.pop("seed", 0))
        return certs.random_cmdp(seed, **definition), None
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad problem definition: {exc}") from exc


def build_aggregation(cfg: ExperimentConfig, cmdp: Cmdp, grid: GridworldConfig | None) -> StateAggregation:
    agg = cfg.aggregation
    if agg in ("identity", 1, None):
        return StateAggregation.identity(cmdp.n_states)
    if isinstance(agg, int) or (isinstance(agg, str) and agg.isdigit()):
        if grid is None:
            raise UsageError("block aggregation needs a gridworld problem")
        return StateAggregation.from_map(block_aggregation_map(grid, int(agg)))
    doc = _read_json(agg)
    cluster_of = doc["cluster_of"] if isinstance(doc, dict) else doc
    if len(cluster_of) != cmdp.n_states:
        raise UsageError(f"aggregation map has {len(cluster_of)} entries, expected {cmdp.n_states}")
    return StateAggregation.from_map(cluster_of)


# ---------------------------------------------------------------------------
# output


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(doc: dict) -> str:
    return json.dumps(certs._jsonable(doc), indent=2) + "\n"


def gap_svg(gaps, width: int = 640, height: int = 400, floor: float = 1e-16) -> str:
    """Normalized gap against iteration as one polyline on a log10 y-axis."""
    g = np.maximum(np.abs(np.asarray(gaps, dtype=float)), floor)
    logs = np.log10(g)
    lo, hi = math.floor(logs.min()), math.ceil(logs.max())
    if hi == lo:
        hi = lo + 1
    left, right, top, bottom = 70, 20, 20, 50
    pw, ph = width - left - right, height - top - bottom
    n = max(len(g) - 1, 1)
    xs = left + pw * np.arange(len(g)) / n
    ys = top + ph * (hi - logs) / (hi - lo)
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    ticks = []
    for e in range(lo, hi + 1):
        y = top + ph * (hi - e) / (hi - lo)
        ticks.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>'
                     f'<text x="{left - 8}" y="{y + 4:.2f}" font-size="11" text-anchor="end">1e{e}</text>')
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        *ticks,
        f'<text x="{left + pw / 2}" y="{height - 10}" font-size="13" text-anchor="middle">dual iteration k (0..{n})</text>',
        f'<text x="15" y="{top + ph / 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2})">normalized duality gap</text>',
        f'<polyline fill="none" stroke="black" points="{points}"/>',
        "</svg>",
    ]) + "\n"


def _grid_summary(grid: GridworldConfig | None, policy) -> dict:
    if grid is None or policy is None:
        return {}
    path = greedy_path(grid, policy)
    return {
        "greedy_path": [list(c) for c in path],
        "uses_safe_bridge": any(c in grid.safe_bridge for c in path),
        "uses_unsafe_bridge": any(c in grid.unsafe_bridge for c in path),
        "reaches_goal": grid.goal in path,
        "policy_map": render_policy(grid, policy),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    doc = _read_json(args.path)
    if not isinstance(doc, dict):
        raise UsageError(f"{args.path}: expected a JSON object")
    if "transition" in doc:
        try:
            report = validate(Cmdp.from_dict(doc))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{args.path}: ill-formed model: {exc}") from exc
        print(report)
        return EXIT_OK if report.ok else EXIT_FAIL
    try:
        problems = gridworld_problems(GridworldConfig.from_dict(doc))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{args.path}: ill-formed gridworld config: {exc}") from exc
    print("valid" if not problems else "\n".join(problems))
    return EXIT_OK if not problems else EXIT_FAIL


def cmd_solve(args) -> int:
    cfg = load_config(args)
    cmdp, grid = build_problem(cfg)
    report = validate(cmdp)
    if not report.ok:
        print(report, file=sys.stderr)
        return EXIT_FAIL
    agg = build_aggregation(cfg, cmdp, grid)
    out = Path(cfg.output_dir)
    timings = {}
    t0 = time.perf_counter()
    opt = primal_optimum(cmdp)
    timings["lp_seconds"] = time.perf_counter() - t0
    result = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), "certificates": []}
    if opt.status is not LpStatus.OPTIMAL:
        result.update(status=opt.status.value, p_star=None, trace_path=None, timings=timings)
        atomic_write(out / "result.json", _dumps(result))
        print(f"problem is {opt.status.value}")
        return EXIT_FAIL

    t0 = time.perf_counter()
    trace = dual_descent(cmdp, cfg.solver, p_star=opt.p_star, aggregation=agg)
    timings["dual_descent_seconds"] = time.perf_counter() - t0
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    atomic_write(out / "trace.csv", buf.getvalue())

    norm = max(1.0, abs(opt.p_star))
    final = trace.records[-1]
    summary = {
        "status": trace.status,
        "p_star": opt.p_star,
        "trace_path": "trace.csv",
        "lp_policy": opt.policy,
        "lp_lambda": opt.lambda_lp,
        "iterations": len(trace.records),
        "K": trace.K,
        "final_lambda": final.lam,
        "final_dual_value": final.dual_value,
        "final_delta_estimate": final.delta_estimate,
        "final_normalized_gap": (final.dual_value + max(final.delta_estimate, 0.0) - opt.p_star) / norm,
        "best_dual_value": trace.best_dual_value,
        "best_normalized_gap": (trace.best_dual_value - opt.p_star) / norm,
        "best_feasible_value": trace.best_feasible_value,
        "policy": trace.best_feasible_policy if trace.best_feasible_policy is not None else trace.final_policy,
    }
    if cfg.solver.primal_mode is PrimalMode.EXACT and agg.is_identity:
        d_star, lam = refined_dual_value(cmdp, trace)
        summary.update(refined_dual_value=d_star, refined_lambda=lam,
                       refined_normalized_gap=(d_star - opt.p_star) / norm)
        result["certificates"].append({"name": "zero-gap", "gap": d_star - opt.p_star})
    summary.update(_grid_summary(grid, summary["policy"]))
    result.update(summary)
    result["timings"] = timings
    if cfg.emit_svg:
        atomic_write(out / "gap.svg", gap_svg(trace.gaps / norm))
    atomic_write(out / "result.json", _dumps(result))
    print(f"P* = {opt.p_star:.10g}  iterations = {len(trace.records)}  "
          f"final normalized gap = {summary['final_normalized_gap']:.3e}")
    if "greedy_path" in summary:
        print(summary["policy_map"])
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = load_config(args)
    cmdp, grid = build_problem(cfg)
    opt = primal_optimum(cmdp)
    doc = {"schema_version": SCHEMA_VERSION, "status": opt.status.value, "config": cfg.to_dict()}
    if opt.status is LpStatus.OPTIMAL:
        doc.update(p_star=opt.p_star, occupation_measure=opt.rho, policy=opt.policy,
                   lp_duals=opt.lambda_lp, pivots=opt.solution.iterations,
                   degenerate=opt.solution.degenerate, **_grid_summary(grid, opt.policy))
    atomic_write(Path(cfg.output_dir) / "oracle.json", _dumps(doc))
    print(f"status {opt.status.value}" + (f", P* = {opt.p_star:.10g}" if opt.status is LpStatus.OPTIMAL else ""))
    return EXIT_OK if opt.status is LpStatus.OPTIMAL else EXIT_FAIL


SWEEP_COLUMNS = ("block", "epsilon_measured", "D_theta_star", "gap", "bound_lower")


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    if cfg.source != "gridworld":
        raise UsageError("sweep-aggregation needs a gridworld problem")
    cmdp, grid = build_problem(cfg)
    blocks = sorted(set(cfg.blocks))
    aggs = [StateAggregation.from_map(block_aggregation_map(grid, b)) for b in blocks]
    results = certs.parametric_sweep(cmdp, aggs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for b, r in zip(blocks, results):
        writer.writerow([b, f"{r.epsilon:.12g}", f"{r.d_theta:.12g}", f"{r.gap:.12g}", f"{r.lower:.12g}"])
    out = Path(cfg.output_dir)
    atomic_write(out / "sweep.csv", buf.getvalue())
    by_eps = sorted(results, key=lambda r: r.epsilon)
    monotone = all(b.gap >= a.gap - 1e-6 for a, b in zip(by_eps, by_eps[1:]))
    nested = all(b.gap >= a.gap - 1e-6 for a, b in zip(results, results[1:]))
    atomic_write(out / "sweep.json", _dumps({
        "schema_version": SCHEMA_VERSION, "blocks": blocks, "results": [r.to_dict() for r in results],
        "gap_nondecreasing_in_epsilon": monotone, "gap_nondecreasing_in_block": nested,
    }))
    print(buf.getvalue(), end="")
    if not monotone:
        print("note: gaps are not nondecreasing in measured epsilon", file=sys.stderr)
    return EXIT_OK


def _gridworld_parametric(seed: int) -> certs.CertificateReport:
    grid = GridworldConfig()
    aggs = [StateAggregation.from_map(block_aggregation_map(grid, b)) for b in (1, 2, 4)]
    results = certs.parametric_sweep(build_gridworld(grid), aggs)
    return certs.CertificateReport("parametric-gap", len(results), min(r.margin() for r in results),
                                   1e-6, [r.to_dict() for r in results])


def cmd_certify(args) -> int:
    suites = dict(certs.CERTIFICATES, **{"parametric-gap": None})
    unknown = [n for n in args.names if n not in suites]
    if unknown:
        raise UsageError(f"unknown certificate(s): {', '.join(unknown)}; choose from {', '.join(suites)}")
    seed = 0 if args.seed is None else args.seed
    reports = []
    for name in args.names:
        if name == "parametric-gap":
            rep = _gridworld_parametric(seed)
        elif name == "zero-gap":
            rep = certs.zero_gap_suite(seeds=range(seed, seed + 20))
        else:
            rep = suites[name](seed=seed)
        print(rep)
        reports.append(rep)
    out = Path(args.out or "out")
    atomic_write(out / "certificates.json", _dumps({
        "schema_version": SCHEMA_VERSION, "certificates": [r.to_dict() for r in reports]}))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="experiment config JSON")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--eta", type=float, help="dual step size")
    p.add_argument("--kmax", type=int, help="maximum dual iterations")
    p.add_argument("--mode", choices=[m.value for m in PrimalMode], help="primal solver")
    p.add_argument("--block", type=int, help="gridworld aggregation block size")
    p.add_argument("--seed", type=int, help="overrides generator and sampling seeds")
    p.add_argument("--svg", action="store_true", help="also write gap.svg")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmdp-dual", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="check a model or gridworld config file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    for name, func, text in (("solve", cmd_solve, "run dual descent"),
                             ("oracle", cmd_oracle, "solve the occupancy LP"),
                             ("sweep-aggregation", cmd_sweep, "in-class dual optimum per block size")):
        p = sub.add_parser(name, help=text)
        _experiment_flags(p)
        if name == "sweep-aggregation":
            p.add_argument("--blocks", type=int, nargs="+", help="block sizes (default 1 2 4)")
        p.set_defaults(func=func)

    p = sub.add_parser("certify", help="run numerical certificates")
    p.add_argument("names", nargs="+", help=", ".join([*certs.CERTIFICATES, "parametric-gap"]))
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
