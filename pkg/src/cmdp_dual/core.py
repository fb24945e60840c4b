"""Finite constrained MDPs: data model, validation, the two-bridge gridworld,
scalarized rewards and reward bounds."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tolerances import TOL

Cell = tuple[int, int]

UP, DOWN, LEFT, RIGHT = range(4)
ACTION_NAMES = ("up", "down", "left", "right")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


@dataclass(frozen=True, eq=False)
class Cmdp:
    """Constrained MDP with ``m`` constraints ``V_i(pi) >= c_i``.

    ``transition[s, a, s']`` is P(s'|s,a); ``rewards[0]`` is the objective
    reward and ``rewards[1:]`` the constraint rewards, each of shape
    ``(n_states, n_actions)``.
    """

    transition: np.ndarray
    initial_dist: np.ndarray
    rewards: np.ndarray
    thresholds: np.ndarray
    gamma: float

    def __post_init__(self):
        for name in ("transition", "initial_dist", "rewards", "thresholds"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.rewards.ndim == 2:
            object.__setattr__(self, "rewards", self.rewards[None])
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def m(self) -> int:
        return self.rewards.shape[0] - 1

    def replace(self, **changes) -> "Cmdp":
        fields = dict(
            transition=self.transition,
            initial_dist=self.initial_dist,
            rewards=self.rewards,
            thresholds=self.thresholds,
            gamma=self.gamma,
        )
        fields.update(changes)
        return Cmdp(**fields)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "p0": self.initial_dist.tolist(),
            "transition": self.transition.tolist(),
            "rewards": self.rewards.tolist(),
            "thresholds": self.thresholds.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Cmdp":
        rewards = np.asarray(doc["rewards"], dtype=float)
        cmdp = cls(
            transition=np.asarray(doc["transition"], dtype=float),
            initial_dist=np.asarray(doc["p0"], dtype=float),
            rewards=rewards,
            thresholds=np.asarray(doc.get("thresholds", []), dtype=float).reshape(-1),
            gamma=doc["gamma"],
        )
        for key, actual in (("n_states", cmdp.n_states), ("n_actions", cmdp.n_actions)):
            if key in doc and int(doc[key]) != actual:
                raise ValueError(f"{key}={doc[key]} does not match array shape ({actual})")
        return cmdp


def load_cmdp(path: str | Path) -> Cmdp:
    with open(path, encoding="utf-8") as fh:
        return Cmdp.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    location: tuple = ()

    def __str__(self):
        return self.message


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __str__(self):
        if self.ok:
            return "valid"
        return "\n".join(str(v) for v in self.violations)


def validate(cmdp: Cmdp, tol: float = TOL.prob_sum) -> ValidationReport:
    """List every violated model invariant; empty report iff valid."""
    out: list[Violation] = []
    P, p0, R = cmdp.transition, cmdp.initial_dist, cmdp.rewards

    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        out.append(Violation("shape", f"transition must have shape (S, A, S), got {P.shape}"))
        return ValidationReport(out)
    n_s, n_a = P.shape[:2]
    if n_s < 1 or n_a < 1:
        out.append(Violation("shape", "need at least one state and one action"))
        return ValidationReport(out)
    if p0.shape != (n_s,):
        out.append(Violation("shape", f"p0 must have shape ({n_s},), got {p0.shape}"))
    if R.ndim != 3 or R.shape[1:] != (n_s, n_a):
        out.append(Violation("shape", f"rewards must have shape (m+1, {n_s}, {n_a}), got {R.shape}"))
    elif cmdp.thresholds.shape != (R.shape[0] - 1,):
        out.append(Violation(
            "shape", f"need {R.shape[0] - 1} thresholds, got {cmdp.thresholds.shape[0]}"))

    if not np.all(np.isfinite(P)):
        bad = np.argwhere(~np.isfinite(P))
        for s, a in sorted({(int(x[0]), int(x[1])) for x in bad}):
            out.append(Violation("transition", f"non-finite transition entry at (s={s},a={a})", (s, a)))
    else:
        neg = np.argwhere(P < 0)
        for s, a in sorted({(int(x[0]), int(x[1])) for x in neg}):
            out.append(Violation("transition", f"negative transition probability at (s={s},a={a})", (s, a)))
        sums = P.sum(axis=2)
        for s, a in np.argwhere(np.abs(sums - 1.0) > tol):
            out.append(Violation(
                "transition",
                f"transition row (s={s},a={a}) sums to {sums[s, a]:.12g}, expected 1",
                (int(s), int(a)),
            ))

    if p0.shape == (n_s,):
        if np.any(p0 < 0) or not np.all(np.isfinite(p0)):
            out.append(Violation("p0", "p0 has negative or non-finite entries"))
        elif abs(p0.sum() - 1.0) > tol:
            out.append(Violation("p0", f"p0 sums to {p0.sum():.12g}, expected 1"))

    if not np.all(np.isfinite(R)):
        for i, s, a in np.argwhere(~np.isfinite(R)):
            out.append(Violation("reward", f"non-finite reward r_{i} at (s={s},a={a})", (int(s), int(a))))
    if not np.all(np.isfinite(cmdp.thresholds)):
        out.append(Violation("threshold", "non-finite threshold"))

    g = cmdp.gamma
    if not (math.isfinite(g) and 0.0 < g < 1.0):
        out.append(Violation("gamma", f"discount gamma={g} outside (0, 1)"))
    return ValidationReport(out)


def check_policy(policy: np.ndarray, n_states: int, n_actions: int, tol: float = 1e-10) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (n_states, n_actions):
        raise ValueError(f"policy shape {policy.shape} != ({n_states}, {n_actions})")
    if np.any(policy < -tol) or np.any(np.abs(policy.sum(axis=1) - 1.0) > tol):
        raise ValueError("policy rows must be probability vectors")
    return policy


def _check_lambda(cmdp: Cmdp, lam) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if cmdp.m == 0 and lam.size == 0:
        return np.zeros(0)
    if lam.shape != (cmdp.m,):
        raise ValueError(f"multiplier vector has length {lam.size}, CMDP has m={cmdp.m}")
    if np.any(lam < 0):
        raise ValueError("multipliers must be nonnegative")
    return lam


def scalarized_reward(cmdp: Cmdp, lam) -> np.ndarray:
    """``r_lambda = r_0 + sum_i lambda_i r_i``."""
    lam = _check_lambda(cmdp, lam)
    return cmdp.rewards[0] + np.tensordot(lam, cmdp.rewards[1:], axes=1)


@dataclass(frozen=True)
class RewardBounds:
    B_r0: float
    B_r: float
    B: float
    B_ri: tuple[float, ...] = ()


def reward_bounds(cmdp: Cmdp) -> RewardBounds:
    per = np.abs(cmdp.rewards).reshape(cmdp.m + 1, -1).max(axis=1)
    B_ri = per[1:]
    B = float(np.sum((B_ri / (1.0 - cmdp.gamma) - cmdp.thresholds) ** 2))
    return RewardBounds(
        B_r0=float(per[0]),
        B_r=float(B_ri.max()) if cmdp.m else 0.0,
        B=B,
        B_ri=tuple(float(b) for b in B_ri),
    )


# ---------------------------------------------------------------------------
# gridworld


def _cells(cells) -> tuple[Cell, ...]:
    return tuple((int(r), int(c)) for r, c in cells)


@dataclass(frozen=True)
class GridworldConfig:
    """Two-bridge river crossing.  Cells are ``(row, col)``, zero-indexed."""

    width: int = 8
    height: int = 8
    start: Cell = (3, 0)
    goal: Cell = (3, 7)
    river: tuple[Cell, ...] = tuple((r, 3) for r in range(8))
    safe_bridge: tuple[Cell, ...] = ((0, 3),)
    unsafe_bridge: tuple[Cell, ...] = ((3, 3),)
    goal_reward: float = 10.0
    step_reward: float = -1.0
    unsafe_visit_threshold: float | None = None  # default -0.01 / (1 - gamma)
    gamma: float = 0.95
    slip_prob: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(x) for x in self.start))
        object.__setattr__(self, "goal", tuple(int(x) for x in self.goal))
        for name in ("river", "safe_bridge", "unsafe_bridge"):
            object.__setattr__(self, name, _cells(getattr(self, name)))

    @property
    def threshold(self) -> float:
        if self.unsafe_visit_threshold is None:
            return -0.01 / (1.0 - self.gamma)
        return float(self.unsafe_visit_threshold)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def index(self, cell: Cell) -> int:
        return cell[0] * self.width + cell[1]

    def cell(self, index: int) -> Cell:
        return divmod(int(index), self.width)

    @property
    def blocked(self) -> frozenset[Cell]:
        return frozenset(self.river) - set(self.safe_bridge) - set(self.unsafe_bridge)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "start": list(self.start),
            "goal": list(self.goal),
            "river": [list(c) for c in self.river],
            "safe_bridge": [list(c) for c in self.safe_bridge],
            "unsafe_bridge": [list(c) for c in self.unsafe_bridge],
            "goal_reward": self.goal_reward,
            "step_reward": self.step_reward,
            "unsafe_visit_threshold": self.threshold,
            "gamma": self.gamma,
            "slip_prob": self.slip_prob,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GridworldConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown gridworld fields: {sorted(unknown)}")
        return cls(**doc)


def load_gridworld_config(path: str | Path) -> GridworldConfig:
    with open(path, encoding="utf-8") as fh:
        return GridworldConfig.from_dict(json.load(fh))


def _reachable(cfg: GridworldConfig, blocked: frozenset[Cell]) -> set[Cell]:
    seen = {cfg.start}
    todo = deque([cfg.start])
    while todo:
        r, c = todo.popleft()
        for dr, dc in _MOVES.values():
            nxt = (r + dr, c + dc)
            if (0 <= nxt[0] < cfg.height and 0 <= nxt[1] < cfg.width
                    and nxt not in blocked and nxt not in seen):
                seen.add(nxt)
                todo.append(nxt)
    return seen


def gridworld_problems(cfg: GridworldConfig) -> list[str]:
    problems = []
    if cfg.width < 1 or cfg.height < 1:
        return ["grid must have positive width and height"]
    inside = lambda cell: 0 <= cell[0] < cfg.height and 0 <= cell[1] < cfg.width  # noqa: E731
    for name in ("start", "goal"):
        if not inside(getattr(cfg, name)):
            problems.append(f"{name} {getattr(cfg, name)} outside the grid")
    for name in ("river", "safe_bridge", "unsafe_bridge"):
        for cell in getattr(cfg, name):
            if not inside(cell):
                problems.append(f"{name} cell {cell} outside the grid")
    if set(cfg.safe_bridge) & set(cfg.unsafe_bridge):
        problems.append("safe and unsafe bridges overlap")
    if not set(cfg.safe_bridge) | set(cfg.unsafe_bridge) <= set(cfg.river):
        problems.append("bridges must lie on river cells")
    if cfg.start in cfg.blocked or cfg.goal in cfg.blocked:
        problems.append("start/goal inside the river")
    if cfg.start == cfg.goal:
        problems.append("start equals goal")
    if not 0.0 <= cfg.slip_prob < 1.0:
        problems.append(f"slip_prob={cfg.slip_prob} outside [0, 1)")
    if not 0.0 < cfg.gamma < 1.0:
        problems.append(f"gamma={cfg.gamma} outside (0, 1)")
    if problems:
        return problems
    if cfg.goal in _reachable(cfg, frozenset(cfg.river)):
        problems.append("start and goal are not separated by the river")
    elif cfg.goal not in _reachable(cfg, cfg.blocked):
        problems.append("goal unreachable through the bridges")
    return problems


def build_gridworld(cfg: GridworldConfig | None = None) -> Cmdp:
    """Gridworld CMDP with one constraint (unsafe-bridge visitation).

    States are the ``width*height`` cells in row-major order plus one
    absorbing sink.  The goal pays ``goal_reward`` once and moves to the
    sink; blocked river cells are unreachable self-loops.
    """
    cfg = cfg or GridworldConfig()
    problems = gridworld_problems(cfg)
    if problems:
        raise ValueError("invalid gridworld config: " + "; ".join(problems))

    n_cells = cfg.n_cells
    sink = n_cells
    n_s, n_a = n_cells + 1, 4
    blocked = cfg.blocked
    P = np.zeros((n_s, n_a, n_s))
    r0 = np.full((n_s, n_a), float(cfg.step_reward))
    r1 = np.zeros((n_s, n_a))

    def move(cell: Cell, a: int) -> int:
        dr, dc = _MOVES[a]
        nxt = (cell[0] + dr, cell[1] + dc)
        if not (0 <= nxt[0] < cfg.height and 0 <= nxt[1] < cfg.width) or nxt in blocked:
            nxt = cell
        return cfg.index(nxt)

    for s in range(n_cells):
        cell = cfg.cell(s)
        if cell == cfg.goal:
            P[s, :, sink] = 1.0
            r0[s] = cfg.goal_reward
            continue
        if cell in blocked:
            P[s, :, s] = 1.0
            continue
        targets = [move(cell, a) for a in range(n_a)]
        for a in range(n_a):
            P[s, a, targets[a]] += 1.0 - cfg.slip_prob
            for b in range(n_a):
                P[s, a, targets[b]] += cfg.slip_prob / n_a
    for cell in cfg.unsafe_bridge:
        r1[cfg.index(cell)] = -1.0
    P[sink, :, sink] = 1.0
    r0[sink] = 0.0

    p0 = np.zeros(n_s)
    p0[cfg.index(cfg.start)] = 1.0
    return Cmdp(
        transition=P,
        initial_dist=p0,
        rewards=np.stack([r0, r1]),
        thresholds=np.array([cfg.threshold]),
        gamma=cfg.gamma,
    )


def greedy_path(cfg: GridworldConfig, policy: np.ndarray, max_steps: int | None = None) -> list[Cell]:
    """Follow the most probable action from ``start`` until the goal (or a
    repeated cell).  Only meaningful for deterministic dynamics."""
    P = build_gridworld(cfg).transition
    max_steps = max_steps or cfg.n_cells + 1
    s = cfg.index(cfg.start)
    path = [cfg.start]
    for _ in range(max_steps):
        if cfg.cell(s) == cfg.goal:
            break
        a = int(np.argmax(policy[s]))
        s = int(np.argmax(P[s, a]))
        if s >= cfg.n_cells or cfg.cell(s) in path:
            break
        path.append(cfg.cell(s))
    return path


def block_aggregation_map(cfg: GridworldConfig, block: int) -> np.ndarray:
    """Cluster index per gridworld state for ``block x block`` tiles; the
    sink gets its own cluster."""
    if block < 1:
        raise ValueError("block size must be positive")
    bw = -(-cfg.width // block)
    cluster = np.empty(cfg.n_cells + 1, dtype=np.int64)
    for s in range(cfg.n_cells):
        r, c = cfg.cell(s)
        cluster[s] = (r // block) * bw + (c // block)
    cluster[-1] = cluster[:-1].max() + 1
    # dense relabel
    _, cluster = np.unique(cluster, return_inverse=True)
    return cluster.astype(np.int64)


def render_policy(cfg: GridworldConfig, policy: np.ndarray) -> str:
    arrows = "^v<>"
    lines = []
    for r in range(cfg.height):
        row = []
        for c in range(cfg.width):
            cell = (r, c)
            if cell == cfg.goal:
                row.append("G")
            elif cell in cfg.blocked:
                row.append("~")
            else:
                row.append(arrows[int(np.argmax(policy[cfg.index(cell)]))])
        lines.append("".join(row))
    return "\n".join(lines)
