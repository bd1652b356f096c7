"""Finite MDPs, perturbation neighborhoods and exact solution machinery.

Transitions are stored as a sparse ``(n_states * n_actions, n_states)`` matrix
so the same type serves 3-state toy problems and 10^5-point state grids.
Row ``s * n_actions + a`` holds ``P(. | s, a)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

STOCH_TOL = 1e-12
TIE_TOL = 1e-9


@dataclass(frozen=True)
class TabularMdp:
    """Finite discounted MDP.

    ``transition`` may be given as a dense ``(S, A, S)`` array or as a sparse
    matrix with ``S * A`` rows; it is stored in CSR form.
    """

    transition: sp.csr_matrix
    reward: np.ndarray
    gamma: float
    mu0: np.ndarray
    state_coords: Optional[np.ndarray] = None

    def __post_init__(self):
        reward = np.asarray(self.reward, dtype=float)
        if reward.ndim != 2:
            raise ValueError("reward must be a (n_states, n_actions) matrix")
        n_s, n_a = reward.shape
        trans = self.transition
        if sp.issparse(trans):
            trans = sp.csr_matrix(trans, dtype=float)
        else:
            trans = np.asarray(trans, dtype=float)
            if trans.shape != (n_s, n_a, n_s):
                raise ValueError(f"transition shape {trans.shape} != {(n_s, n_a, n_s)}")
            trans = sp.csr_matrix(trans.reshape(n_s * n_a, n_s))
        if trans.shape != (n_s * n_a, n_s):
            raise ValueError(f"transition shape {trans.shape} != {(n_s * n_a, n_s)}")
        trans.sum_duplicates()
        if trans.nnz and trans.data.min() < 0:
            raise ValueError("negative transition probability")
        row_sums = np.asarray(trans.sum(axis=1)).ravel()
        if np.max(np.abs(row_sums - 1.0)) > STOCH_TOL:
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(reward)):
            raise ValueError("rewards must be finite")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        mu0 = np.asarray(self.mu0, dtype=float)
        if mu0.shape != (n_s,) or mu0.min() < 0 or abs(mu0.sum() - 1.0) > STOCH_TOL:
            raise ValueError("mu0 must be a distribution over states")
        coords = self.state_coords
        if coords is not None:
            coords = np.asarray(coords, dtype=float)
            if coords.ndim == 1:
                coords = coords[:, None]
            if coords.shape[0] != n_s:
                raise ValueError("state_coords must have one row per state")
        object.__setattr__(self, "transition", trans)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "state_coords", coords)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    def dense_transition(self) -> np.ndarray:
        """Dense ``P[s, a, s']`` view (only sensible for small MDPs)."""
        return self.transition.toarray().reshape(self.n_states, self.n_actions, self.n_states)

    def expect_next(self, v: np.ndarray) -> np.ndarray:
        """``E_{s' ~ P(.|s,a)} v(s')`` as an ``(S, A)`` matrix."""
        return (self.transition @ v).reshape(self.n_states, self.n_actions)

    def policy_matrix(self, policy) -> sp.csr_matrix:
        """State-to-state transition matrix under ``policy``."""
        pi = policy_table(policy, self.n_states, self.n_actions)
        weights = sp.diags(pi.ravel())
        rows = sp.kron(sp.eye(self.n_states), np.ones((1, self.n_actions)), format="csr")
        return sp.csr_matrix(rows @ weights @ self.transition)


def policy_table(policy, n_states: int, n_actions: int) -> np.ndarray:
    """Normalise a deterministic (int vector) or stochastic policy to ``(S, A)``."""
    pol = np.asarray(policy)
    if pol.ndim == 1:
        table = np.zeros((n_states, n_actions))
        table[np.arange(n_states), pol.astype(int)] = 1.0
        return table
    pol = pol.astype(float)
    if pol.shape != (n_states, n_actions):
        raise ValueError(f"policy shape {pol.shape} != {(n_states, n_actions)}")
    if pol.min() < 0 or np.max(np.abs(pol.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("policy rows must be distributions")
    return pol


def row_max(q: np.ndarray) -> np.ndarray:
    """``q.max(axis=1)`` computed column by column (much faster for the
    tall, narrow tables used here)."""
    out = q[:, 0].copy()
    for a in range(1, q.shape[1]):
        np.maximum(out, q[:, a], out=out)
    return out


def bellman_backup(q: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    return mdp.reward + mdp.gamma * mdp.expect_next(row_max(q))


def deterministic_successors(mdp: TabularMdp) -> Optional[np.ndarray]:
    """``(S, A)`` successor indices when every transition row is a point
    mass, else ``None``."""
    t = mdp.transition
    if t.nnz != t.shape[0] or not np.all(np.diff(t.indptr) == 1) or not np.all(t.data == 1.0):
        return None
    return t.indices.astype(np.intp).reshape(mdp.n_states, mdp.n_actions)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000,
                    return_trace: bool = False):
    """Iterate the Bellman optimality backup from Q = 0 until the sup-norm
    residual drops to ``tol``. The returned table satisfies
    ``||T_B Q - Q||_inf <= tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not mdp.gamma < 1.0:
        raise ValueError("value iteration needs gamma < 1")
    q = np.zeros_like(mdp.reward)
    trace = []
    succ = deterministic_successors(mdp)
    for _ in range(max_iter):
        if succ is None:
            q_next = bellman_backup(q, mdp)
        else:
            q_next = mdp.reward + mdp.gamma * np.take(row_max(q), succ)
        res = float(np.max(np.abs(q_next - q)))
        trace.append(res)
        q = q_next
        # the residual of q_next is at most gamma * res
        if mdp.gamma * res <= tol:
            break
    return (q, np.array(trace)) if return_trace else q


def greedy_policy(q: np.ndarray, tie_rule: str = "lowest_index") -> np.ndarray:
    if tie_rule != "lowest_index":
        raise ValueError(f"unsupported tie rule {tie_rule!r}")
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q must be finite")
    return np.argmax(q, axis=-1)


def argmax_sets(q: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Boolean mask of near-optimal actions per state."""
    q = np.asarray(q, dtype=float)
    return q >= q.max(axis=-1, keepdims=True) - tol


@dataclass
class Visitation:
    d: np.ndarray
    policy_ref: np.ndarray

    @property
    def state_marginal(self) -> np.ndarray:
        return self.d.sum(axis=1)


def visitation_distribution(mdp: TabularMdp, policy, mu0=None) -> Visitation:
    """Normalised discounted occupancy, by a direct sparse solve of
    ``(I - gamma P_pi^T) d_s = (1 - gamma) mu0``."""
    pi = policy_table(policy, mdp.n_states, mdp.n_actions)
    mu0 = mdp.mu0 if mu0 is None else np.asarray(mu0, dtype=float)
    p_pi = mdp.policy_matrix(pi)
    system = sp.csc_matrix(sp.eye(mdp.n_states) - mdp.gamma * p_pi.T)
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            d_s = spla.spsolve(system, (1.0 - mdp.gamma) * mu0)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise ValueError("singular occupancy system; malformed transitions") from exc
    d_s = np.atleast_1d(d_s)
    if not np.all(np.isfinite(d_s)):
        raise ValueError("singular occupancy system; malformed transitions")
    d_s = np.clip(d_s, 0.0, None)
    return Visitation(d=d_s[:, None] * pi, policy_ref=pi)


@dataclass(frozen=True)
class PerturbationSet:
    """Adjacency ``B(s)`` in CSR layout: neighbors of ``s`` are
    ``indices[indptr[s]:indptr[s+1]]`` (always including ``s``)."""

    epsilon: float
    metric: str
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def n_states(self) -> int:
        return len(self.indptr) - 1

    def neighbors(self, s: int) -> np.ndarray:
        return self.indices[self.indptr[s]:self.indptr[s + 1]]

    def row_ids(self) -> np.ndarray:
        """Owning state of each adjacency entry."""
        return np.repeat(np.arange(self.n_states), np.diff(self.indptr))

    def as_sets(self) -> list:
        return [set(self.neighbors(s).tolist()) for s in range(self.n_states)]


def _csr_from_lists(lists: Sequence[np.ndarray]):
    lens = np.array([len(x) for x in lists], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(lens)])
    indices = np.concatenate([np.sort(np.asarray(x, dtype=np.int64)) for x in lists]) \
        if lists else np.zeros(0, dtype=np.int64)
    return indptr, indices


def perturbation_set(coords, epsilon: float, metric: str = "L_inf",
                     slack: float = 1e-12) -> PerturbationSet:
    """All states whose coordinates lie within ``epsilon`` (closed ball)."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    p = {"L_inf": np.inf, "L_2": 2.0}.get(metric)
    if p is None:
        raise ValueError(f"unknown metric {metric!r}")
    tree = cKDTree(coords)
    lists = tree.query_ball_point(coords, r=epsilon + slack, p=p)
    indptr, indices = _csr_from_lists([np.asarray(x) for x in lists])
    return PerturbationSet(float(epsilon), metric, indptr, indices)


def window_perturbation_set(n: int, half_width: int) -> PerturbationSet:
    """Index-window neighborhoods ``{s-w, ..., s+w}`` on a 1-D uniform grid,
    built without a k-d tree."""
    offsets = np.arange(-half_width, half_width + 1)
    idx = np.arange(n)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < n)
    counts = valid.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return PerturbationSet(float("nan"), "L_inf", indptr, idx[valid].astype(np.int64))


@dataclass(frozen=True)
class IntrinsicNeighborhood:
    """``B*(s)``: members of ``B(s)`` sharing the optimal action set of ``s``."""

    base: PerturbationSet
    q_star: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def epsilon(self) -> float:
        return self.base.epsilon

    @property
    def n_states(self) -> int:
        return len(self.indptr) - 1

    def neighbors(self, s: int) -> np.ndarray:
        return self.indices[self.indptr[s]:self.indptr[s + 1]]

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_states), np.diff(self.indptr))

    def as_sets(self) -> list:
        return [set(self.neighbors(s).tolist()) for s in range(self.n_states)]


def _same_argmax_mask(q_star: np.ndarray, b) -> np.ndarray:
    opt = argmax_sets(q_star)
    rows = b.row_ids()
    return np.all(opt[rows] == opt[b.indices], axis=1)


def intrinsic_neighborhood(mdp: TabularMdp, q_star: np.ndarray, b: PerturbationSet) -> IntrinsicNeighborhood:
    q_star = np.asarray(q_star, dtype=float)
    if q_star.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("q_star shape does not match the MDP")
    keep = _same_argmax_mask(q_star, b)
    rows = b.row_ids()[keep]
    counts = np.bincount(rows, minlength=b.n_states)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return IntrinsicNeighborhood(b, q_star, indptr, b.indices[keep])


def nonintrinsic_state_set(mdp: TabularMdp, q_star: np.ndarray, b: PerturbationSet):
    """Return ``(S_nin, S_nu)``: states with ``B(s) != B*(s)`` and states whose
    optimal action set has more than one element."""
    keep = _same_argmax_mask(np.asarray(q_star, dtype=float), b)
    s_nin = np.unique(b.row_ids()[~keep])
    s_nu = np.flatnonzero(argmax_sets(q_star).sum(axis=1) > 1)
    return s_nin, s_nu


def discontinuity_states(q_star: np.ndarray, b: PerturbationSet, threshold: float) -> np.ndarray:
    """Grid surrogate for the discontinuity set of Q*: states with a neighbor
    in ``b`` that has a different optimal action set and whose Q* row differs
    by more than ``threshold`` in sup norm."""
    q_star = np.asarray(q_star, dtype=float)
    rows = b.row_ids()
    opt = argmax_sets(q_star)
    differs = ~np.all(opt[rows] == opt[b.indices], axis=1)
    jump = np.max(np.abs(q_star[rows] - q_star[b.indices]), axis=1) > threshold
    return np.unique(rows[differs & jump])


def dilate(states, b: PerturbationSet) -> np.ndarray:
    """Union of ``B(s)`` over ``s`` in ``states``; since the ball is
    symmetric this is every state within epsilon of the set."""
    states = np.asarray(states, dtype=np.int64)
    if states.size == 0:
        return states
    mark = np.zeros(b.n_states, dtype=bool)
    mark[states] = True
    hit = np.zeros(b.n_states, dtype=bool)
    rows = b.row_ids()
    hit[rows[mark[b.indices]]] = True
    return np.flatnonzero(hit)


# --- plain-text serialisation -------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_mdp(mdp: TabularMdp, path) -> None:
    """Header ``n_states n_actions gamma``, then the reward block (one row per
    state), the transition block (one row per (s, a), row-major), the initial
    distribution, and optionally a coordinate block."""
    dense = mdp.dense_transition()
    lines = [f"{mdp.n_states} {mdp.n_actions} {_fmt(mdp.gamma)}"]
    lines += [" ".join(_fmt(v) for v in row) for row in mdp.reward]
    lines += [" ".join(_fmt(v) for v in dense[s, a])
              for s in range(mdp.n_states) for a in range(mdp.n_actions)]
    lines.append(" ".join(_fmt(v) for v in mdp.mu0))
    if mdp.state_coords is not None:
        lines.append(f"coords {mdp.state_coords.shape[1]}")
        lines += [" ".join(_fmt(v) for v in row) for row in mdp.state_coords]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mdp(path) -> TabularMdp:
    with open(path, "r", encoding="ascii") as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    try:
        n_s, n_a, gamma = int(rows[0][0]), int(rows[0][1]), float(rows[0][2])
        pos = 1
        reward = np.array(rows[pos:pos + n_s], dtype=float)
        pos += n_s
        trans = np.array(rows[pos:pos + n_s * n_a], dtype=float).reshape(n_s, n_a, n_s)
        pos += n_s * n_a
        mu0 = np.array(rows[pos], dtype=float)
        pos += 1
        coords = None
        if pos < len(rows) and rows[pos][0] == "coords":
            coords = np.array(rows[pos + 1:pos + 1 + n_s], dtype=float)
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed MDP file {path}") from exc
    return TabularMdp(trans, reward, gamma, mu0, coords)
