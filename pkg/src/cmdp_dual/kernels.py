"""Inner loops: Bellman backups, value-iteration sweeps, simplex pivots and
episode rollouts.

Each kernel exists twice.  The ``_nb_*`` versions are scalar loops compiled
by numba; the ``_np_*`` versions are vectorized numpy.  The public names at
the bottom of the module bind to one or the other depending on
:func:`cmdp_dual._accel.use_numba`.  Both paths consume the same inputs
(including pre-drawn uniforms for rollouts) so they agree to rounding.
"""
from __future__ import annotations

import numpy as np

from ._accel import njit, use_numba

# ---------------------------------------------------------------------------
# numpy path


def _np_bellman_q(P, r, v, gamma):
    return r + gamma * (P @ v)


def _np_vi_sweeps(P, r, v, gamma, max_sweeps, tol):
    v = v.copy()
    residual = np.inf
    for _ in range(max_sweeps):
        v_new = (r + gamma * (P @ v)).max(axis=1)
        residual = float(np.abs(v_new - v).max())
        v = v_new
        if residual <= tol:
            break
    return v, residual


def _np_pivot(T, row, col):
    T[row] /= T[row, col]
    factors = T[:, col].copy()
    factors[row] = 0.0
    T -= np.outer(factors, T[row])


def _np_rollouts(P_cdf, pi_cdf, p0_cdf, r, gamma, u0, u):
    n_ep, horizon, _ = u.shape
    states = np.empty((n_ep, horizon), dtype=np.int64)
    actions = np.empty((n_ep, horizon), dtype=np.int64)
    rewards = np.empty((n_ep, horizon))
    s = np.minimum(np.searchsorted(p0_cdf, u0, side="right"), p0_cdf.shape[0] - 1)
    n_a = pi_cdf.shape[1]
    n_s = P_cdf.shape[2]
    for t in range(horizon):
        a = (u[:, t, 0][:, None] >= pi_cdf[s]).sum(axis=1)
        a = np.minimum(a, n_a - 1)
        states[:, t] = s
        actions[:, t] = a
        rewards[:, t] = r[s, a]
        s = (u[:, t, 1][:, None] >= P_cdf[s, a]).sum(axis=1)
        s = np.minimum(s, n_s - 1)
    returns = np.empty_like(rewards)
    acc = np.zeros(n_ep)
    for t in range(horizon - 1, -1, -1):
        acc = rewards[:, t] + gamma * acc
        returns[:, t] = acc
    return states, actions, returns


# ---------------------------------------------------------------------------
# numba path


@njit
def _nb_bellman_q(P, r, v, gamma):
    n_s, n_a, n_next = P.shape
    q = np.empty((n_s, n_a))
    for s in range(n_s):
        for a in range(n_a):
            acc = 0.0
            for sp in range(n_next):
                acc += P[s, a, sp] * v[sp]
            q[s, a] = r[s, a] + gamma * acc
    return q


@njit
def _nb_vi_sweeps(P, r, v, gamma, max_sweeps, tol):
    n_s, n_a, n_next = P.shape
    v = v.copy()
    v_new = np.empty(n_s)
    residual = np.inf
    for _ in range(max_sweeps):
        residual = 0.0
        for s in range(n_s):
            best = -np.inf
            for a in range(n_a):
                acc = 0.0
                for sp in range(n_next):
                    acc += P[s, a, sp] * v[sp]
                val = r[s, a] + gamma * acc
                if val > best:
                    best = val
            v_new[s] = best
            diff = abs(best - v[s])
            if diff > residual:
                residual = diff
        v[:] = v_new
        if residual <= tol:
            break
    return v, residual


@njit
def _nb_pivot(T, row, col):
    n_rows, n_cols = T.shape
    piv = T[row, col]
    for j in range(n_cols):
        T[row, j] /= piv
    for i in range(n_rows):
        if i == row:
            continue
        f = T[i, col]
        if f != 0.0:
            for j in range(n_cols):
                T[i, j] -= f * T[row, j]


@njit
def _nb_rollouts(P_cdf, pi_cdf, p0_cdf, r, gamma, u0, u):
    n_ep, horizon, _ = u.shape
    n_s = P_cdf.shape[2]
    n_a = pi_cdf.shape[1]
    states = np.empty((n_ep, horizon), dtype=np.int64)
    actions = np.empty((n_ep, horizon), dtype=np.int64)
    returns = np.empty((n_ep, horizon))
    for e in range(n_ep):
        s = 0
        while s < n_s - 1 and u0[e] >= p0_cdf[s]:
            s += 1
        for t in range(horizon):
            a = 0
            while a < n_a - 1 and u[e, t, 0] >= pi_cdf[s, a]:
                a += 1
            states[e, t] = s
            actions[e, t] = a
            returns[e, t] = r[s, a]
            sp = 0
            while sp < n_s - 1 and u[e, t, 1] >= P_cdf[s, a, sp]:
                sp += 1
            s = sp
        acc = 0.0
        for t in range(horizon - 1, -1, -1):
            acc = returns[e, t] + gamma * acc
            returns[e, t] = acc
    return states, actions, returns


# ---------------------------------------------------------------------------
# dispatch

if use_numba():
    bellman_q = _nb_bellman_q
    vi_sweeps = _nb_vi_sweeps
    pivot = _nb_pivot
    rollouts = _nb_rollouts
    BACKEND = "numba"
else:
    bellman_q = _np_bellman_q
    vi_sweeps = _np_vi_sweeps
    pivot = _np_pivot
    rollouts = _np_rollouts
    BACKEND = "numpy"

NUMPY_KERNELS = {
    "bellman_q": _np_bellman_q,
    "vi_sweeps": _np_vi_sweeps,
    "pivot": _np_pivot,
    "rollouts": _np_rollouts,
}
NUMBA_KERNELS = {
    "bellman_q": _nb_bellman_q,
    "vi_sweeps": _nb_vi_sweeps,
    "pivot": _nb_pivot,
    "rollouts": _nb_rollouts,
}
