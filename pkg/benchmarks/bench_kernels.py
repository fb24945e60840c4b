"""Time the numba kernels against their numpy twins on gridworld-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel is first called once per backend (compilation, warm caches) and
the outputs are compared; then the best wall time of ``--repeat`` calls is
reported.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from cmdp_dual import kernels
from cmdp_dual._accel import use_numba
from cmdp_dual.core import build_gridworld
from cmdp_dual.lp import build_occupancy_lp


def _inputs(seed: int = 0) -> dict:
    cmdp = build_gridworld()
    P = np.ascontiguousarray(cmdp.transition)
    r = np.ascontiguousarray(cmdp.rewards[0] + 6.5 * cmdp.rewards[1])
    v = np.zeros(cmdp.n_states)
    lp = build_occupancy_lp(cmdp)
    T = np.hstack([lp.A_eq, lp.b_eq[:, None]])
    T = np.vstack([T, np.append(lp.c, 0.0)])
    row = 0
    col = int(np.flatnonzero(np.abs(T[row, :-1]) > 1e-9)[0])
    rng = np.random.default_rng(seed)
    pi = np.full((cmdp.n_states, cmdp.n_actions), 1.0 / cmdp.n_actions)
    episodes, horizon = 64, 200
    return {
        "bellman_q": (P, r, v, cmdp.gamma),
        "vi_sweeps": (P, r, v, cmdp.gamma, 50, 1e-12),
        "pivot": (T, row, col),
        "rollouts": (np.ascontiguousarray(np.cumsum(P, axis=2)), np.cumsum(pi, axis=1),
                     np.cumsum(cmdp.initial_dist), r, cmdp.gamma,
                     rng.random(episodes), rng.random((episodes, horizon, 2))),
    }


def _call(fn, name, args):
    if name == "pivot":   # in place: work on a copy
        T = args[0].copy()
        fn(T, *args[1:])
        return T
    return fn(*args)


def _agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return bool(np.allclose(a, b, rtol=1e-10, atol=1e-12))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--json", metavar="PATH", help="also write results as JSON")
    args = parser.parse_args(argv)
    if not use_numba():
        print("numba disabled or missing; only the numpy path can be timed")
    rows = []
    for name, inputs in _inputs().items():
        row = {"kernel": name}
        outputs = {}
        for backend, table in (("numpy", kernels.NUMPY_KERNELS), ("numba", kernels.NUMBA_KERNELS)):
            if backend == "numba" and not use_numba():
                continue
            fn = table[name]
            outputs[backend] = _call(fn, name, inputs)
            timer = timeit.Timer(lambda: _call(fn, name, inputs))
            row[f"{backend}_ms"] = 1e3 * min(timer.repeat(repeat=args.repeat, number=1))
        if len(outputs) == 2:
            row["agree"] = _agree(outputs["numpy"], outputs["numba"])
            row["speedup"] = row["numpy_ms"] / row["numba_ms"]
        rows.append(row)

    print(f"{'kernel':<10} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} agree")
    for row in rows:
        print(f"{row['kernel']:<10} {row['numpy_ms']:>10.3f} {row.get('numba_ms', float('nan')):>10.3f} "
              f"{row.get('speedup', float('nan')):>8.1f} {row.get('agree', '-')}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(row.get("agree", True) for row in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
