"""Desk-scale environments: a gridworld with continuous observations and an
exact tabular model, the drift chain as an interactive environment, and a
2-D point mass with a force action."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .counterexamples import DriftMdpParams, Grid1D, drift_mdp
from .mdp_core import TabularMdp

# actions: up, down, left, right (rows grow downwards)
GRID_MOVES = np.array([[0, -1], [0, 1], [-1, 0], [1, 0]])
GRID_ACTION_NAMES = ("up", "down", "left", "right")

# goal inside a wall ring whose only opening faces down; starts in the corners
DEFAULT_LAYOUT = (
    "S.....S",
    ".......",
    "..###..",
    "..#G#..",
    "..#.#..",
    ".......",
    "S.....S",
)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    truncated: bool = False
    info: dict = field(default_factory=dict)

    @property
    def finished(self) -> bool:
        return self.done or self.truncated


class EpisodeOver(RuntimeError):
    pass


def _parse_layout(layout: Sequence[str]):
    rows = [r.strip() for r in layout if r.strip()]
    h, w = len(rows), len(rows[0])
    if any(len(r) != w for r in rows):
        raise ValueError("layout rows must have equal length")
    cells = {}
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch not in ".#GHS":
                raise ValueError(f"unknown layout symbol {ch!r}")
            cells[(x, y)] = ch
    return w, h, cells


class GridAdversaryEnv:
    """Gridworld with observation ``(x, y) / max_dim`` in ``[0, 1]^2``.

    Layout symbols: ``.`` free, ``#`` wall, ``G`` goal (+1, terminal),
    ``H`` hazard (``hazard_reward``, terminal), ``S`` start cell. Every step
    that does not end on a terminal cell costs ``step_penalty``; moves into
    a wall or off the grid leave the agent in place. Wall cells are kept in
    the tabular model as unreachable self-loops so that state indices cover
    the full grid.
    """

    n_actions = 4
    obs_dim = 2

    def __init__(self, layout: Sequence[str] = DEFAULT_LAYOUT, step_penalty: float = -0.01,
                 goal_reward: float = 1.0, hazard_reward: float = -1.0, gamma: float = 0.95,
                 max_steps: int = 100, seed: int = 0):
        self.layout = tuple(layout)
        self.width, self.height, cells = _parse_layout(layout)
        self.walls = frozenset(c for c, ch in cells.items() if ch == "#")
        self.goals = frozenset(c for c, ch in cells.items() if ch == "G")
        self.hazards = frozenset(c for c, ch in cells.items() if ch == "H")
        if not self.goals:
            raise ValueError("layout needs a goal cell")
        self.cells = sorted(cells, key=lambda c: (c[1], c[0]))
        self.index = {c: i for i, c in enumerate(self.cells)}
        starts = [c for c, ch in cells.items() if ch == "S"]
        if not starts:
            starts = [c for c in self.cells if c not in self.goals | self.hazards | self.walls]
        self.starts = sorted(starts, key=lambda c: (c[1], c[0]))
        self.step_penalty = step_penalty
        self.goal_reward = goal_reward
        self.hazard_reward = hazard_reward
        self.gamma = gamma
        self.max_steps = max_steps
        self.scale = 1.0 / max(self.width, self.height)
        self.obs_low = np.zeros(2)
        self.obs_high = np.array([(self.width - 1) * self.scale, (self.height - 1) * self.scale])
        self._rng = np.random.default_rng(seed)
        self.pos: Optional[Tuple[int, int]] = None
        self.t = 0
        self._over = True

    @property
    def spacing(self) -> float:
        return self.scale

    def observe(self, cell) -> np.ndarray:
        return np.array([cell[0], cell[1]], dtype=float) * self.scale

    def is_terminal(self, cell) -> bool:
        return cell in self.goals or cell in self.hazards

    def move(self, cell, action: int):
        nx, ny = cell[0] + GRID_MOVES[action][0], cell[1] + GRID_MOVES[action][1]
        nxt = (int(nx), int(ny))
        if not (0 <= nxt[0] < self.width and 0 <= nxt[1] < self.height) or nxt in self.walls:
            nxt = cell
        if nxt in self.goals:
            rew = self.goal_reward
        elif nxt in self.hazards:
            rew = self.hazard_reward
        else:
            rew = self.step_penalty
        return nxt, rew

    def reset(self, seed: Optional[int] = None, start=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if start is None:
            start = self.starts[int(self._rng.integers(len(self.starts)))]
        self.pos = tuple(start)
        self.t = 0
        self._over = False
        return self.observe(self.pos)

    def step(self, action) -> StepResult:
        if self._over:
            raise EpisodeOver("step called on a finished episode; call reset()")
        a = int(action)
        if not 0 <= a < self.n_actions:
            raise ValueError(f"action {action} outside 0..{self.n_actions - 1}")
        self.pos, rew = self.move(self.pos, a)
        self.t += 1
        done = self.is_terminal(self.pos)
        truncated = (not done) and self.t >= self.max_steps
        self._over = done or truncated
        return StepResult(self.observe(self.pos), float(rew), done, truncated, {"cell": self.pos})

    @property
    def state(self):
        return self.pos

    def tabularize(self) -> Tuple[TabularMdp, np.ndarray]:
        """Exact MDP over every cell; terminal and wall cells are zero-reward
        self-loops. ``mu0`` is uniform over the start cells."""
        n = len(self.cells)
        rows, cols = [], []
        reward = np.zeros((n, self.n_actions))
        for i, c in enumerate(self.cells):
            for a in range(self.n_actions):
                if self.is_terminal(c) or c in self.walls:
                    nxt, rew = c, 0.0
                else:
                    nxt, rew = self.move(c, a)
                rows.append(i * self.n_actions + a)
                cols.append(self.index[nxt])
                reward[i, a] = rew
        trans = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n * self.n_actions, n))
        mu0 = np.zeros(n)
        for c in self.starts:
            mu0[self.index[c]] += 1.0 / len(self.starts)
        coords = np.stack([self.observe(c) for c in self.cells])
        return TabularMdp(trans, reward, self.gamma, mu0, coords), coords

    def terminal_mask(self) -> np.ndarray:
        return np.array([self.is_terminal(c) for c in self.cells])


class DriftChainEnv:
    """Interactive wrapper over the drift MDP on a 1-D grid; the observation
    is the state coordinate."""

    obs_dim = 1
    n_actions = 2

    def __init__(self, params: DriftMdpParams = DriftMdpParams(), grid: Optional[Grid1D] = None,
                 max_steps: int = 200, seed: int = 0):
        self.params = params
        self.grid = grid or Grid1D(-1.0, 1.0, 201)
        self.mdp = drift_mdp(params, self.grid)
        self.coords = self.grid.points
        self.max_steps = max_steps
        self.obs_low = np.array([self.grid.lo])
        self.obs_high = np.array([self.grid.hi])
        self._rng = np.random.default_rng(seed)
        self.s: Optional[int] = None
        self.t = 0
        self._over = True

    def reset(self, seed: Optional[int] = None, start: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.s = int(self._rng.choice(self.grid.n, p=self.mdp.mu0)) if start is None else int(start)
        self.t = 0
        self._over = False
        return np.array([self.coords[self.s]])

    def step(self, action) -> StepResult:
        if self._over:
            raise EpisodeOver("step called on a finished episode; call reset()")
        a = int(action)
        if not 0 <= a < self.n_actions:
            raise ValueError(f"action {action} outside 0..{self.n_actions - 1}")
        row = self.mdp.transition.getrow(self.s * self.n_actions + a)
        rew = float(self.mdp.reward[self.s, a])
        if row.nnz == 1:
            self.s = int(row.indices[0])
        else:
            self.s = int(self._rng.choice(row.indices, p=row.data))
        self.t += 1
        truncated = self.t >= self.max_steps
        self._over = truncated
        return StepResult(np.array([self.coords[self.s]]), rew, False, truncated, {"state": self.s})

    @property
    def state(self):
        return self.s

    def tabularize(self) -> Tuple[TabularMdp, np.ndarray]:
        return self.mdp, self.coords[:, None]


class PointMassEnv:
    """2-D point mass pushed by a bounded force towards ``goal``.

    State ``(pos, vel)``; ``pos += dt * vel`` then ``vel += dt * (force -
    friction * vel)``, both clipped to their boxes. Reward
    ``-||pos - goal|| - control_cost * ||force||^2``.
    """

    obs_dim = 4
    act_dim = 2

    def __init__(self, dt: float = 0.05, friction: float = 1.0, control_cost: float = 0.01,
                 horizon: int = 200, pos_box: float = 2.0, vel_box: float = 2.0,
                 start_box: float = 1.0, goal=(0.0, 0.0), seed: int = 0):
        self.dt = dt
        self.friction = friction
        self.control_cost = control_cost
        self.horizon = horizon
        self.pos_box = pos_box
        self.vel_box = vel_box
        self.start_box = start_box
        self.goal = np.asarray(goal, dtype=float)
        self.obs_low = np.array([-pos_box, -pos_box, -vel_box, -vel_box])
        self.obs_high = -self.obs_low
        self.act_low = -np.ones(2)
        self.act_high = np.ones(2)
        self._rng = np.random.default_rng(seed)
        self.x: Optional[np.ndarray] = None
        self.t = 0
        self._over = True

    def reset(self, seed: Optional[int] = None, start=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if start is None:
            pos = self._rng.uniform(-self.start_box, self.start_box, 2)
            start = np.concatenate([pos, np.zeros(2)])
        self.x = np.asarray(start, dtype=float).copy()
        self.t = 0
        self._over = False
        return self.x.copy()

    def dynamics(self, x: np.ndarray, force: np.ndarray) -> np.ndarray:
        """One integrator step; broadcasts over leading axes. ``force`` is
        clipped to the action box."""
        x = np.asarray(x, dtype=float)
        force = np.clip(force, self.act_low, self.act_high)
        pos, vel = x[..., :2], x[..., 2:]
        pos = np.clip(pos + self.dt * vel, -self.pos_box, self.pos_box)
        vel = np.clip(vel + self.dt * (force - self.friction * vel), -self.vel_box, self.vel_box)
        return np.concatenate([pos, vel], axis=-1)

    def reward(self, x: np.ndarray, force: np.ndarray):
        """Broadcasts over leading axes; a float for a single state."""
        x = np.asarray(x, dtype=float)
        force = np.clip(force, self.act_low, self.act_high)
        val = (-np.linalg.norm(x[..., :2] - self.goal, axis=-1)
               - self.control_cost * np.sum(force * force, axis=-1))
        return float(val) if np.ndim(val) == 0 else val

    def step(self, action) -> StepResult:
        if self._over:
            raise EpisodeOver("step called on a finished episode; call reset()")
        force = np.asarray(action, dtype=float)
        if force.shape != (2,) or not np.all(np.isfinite(force)):
            raise ValueError("action must be a finite 2-vector")
        force = np.clip(force, self.act_low, self.act_high)
        rew = self.reward(self.x, force)
        self.x = self.dynamics(self.x, force)
        self.t += 1
        truncated = self.t >= self.horizon
        self._over = truncated
        return StepResult(self.x.copy(), rew, False, truncated)

    @property
    def state(self):
        return None if self.x is None else self.x.copy()

    def tabularize(self):
        raise TypeError("the point mass has a continuous state and no exact tabular form")


def tabularize(env):
    return env.tabularize()


def make_env(name: str, **kw):
    table = {"grid": GridAdversaryEnv, "drift": DriftChainEnv, "pointmass": PointMassEnv}
    if name not in table:
        raise ValueError(f"unknown environment {name!r}")
    return table[name](**kw)
