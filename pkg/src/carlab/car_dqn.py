"""Consistent adversarial robust DQN: double/dueling targets, a replay
buffer, and the soft worst-case TD loss with a PGD or IBP inner solver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.special import logsumexp

from . import attacks as atk
from .evaluation import DqnAgent, evaluate, mean_return
from .mdp_core import perturbation_set, visitation_distribution
from .operators import bellman_apply, smoothness_constants
from .tinynet import AdamState, MlpNet, adam_step, input_box


class ReplayBuffer:
    """Ring buffer of ``(s, a, r, s', done)``; sampling is uniform with
    replacement over the stored items."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s_next, done) -> None:
        i = self._pos
        self.obs[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_obs[i] = s_next
        self.dones[i] = done
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> "Batch":
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(self.size, size=batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx],
                     self.next_obs[idx], self.dones[idx])


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.a)


@dataclass
class DqnConfig:
    """``lambda_soft`` accepts ``0`` (hard max) and ``math.inf`` (uniform)."""

    lambda_soft: float = 1.0
    gamma: float = 0.95
    batch_size: int = 32
    target_update: int = 2000
    lr: float = 1.25e-4
    total_steps: int = 150_000
    buffer_capacity: int = 200_000
    learning_starts: int = 1000
    train_freq: int = 1
    explore_start: float = 1.0
    explore_end: float = 0.01
    explore_fraction: float = 0.3
    epsilon: float = 0.4 / 7
    eps_ramp_start: float = 0.0
    eps_ramp_end: float = 4.0 / 4.5
    solver: str = "ibp"
    huber: bool = True
    huber_delta: float = 1.0
    hidden: tuple = (64, 64)
    dueling: bool = True
    double: bool = True
    attack_steps: int = 10
    alpha_gradient: bool = False
    eval_interval: int = 10_000
    eval_episodes: int = 20
    eval_attack: str = "pgd"

    def __post_init__(self):
        if not (self.lambda_soft >= 0):
            raise ValueError("lambda_soft must be >= 0 or inf")
        if self.solver not in ("pgd", "ibp"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.batch_size < 1 or self.target_update < 1 or self.train_freq < 1:
            raise ValueError("batch_size, target_update and train_freq must be positive")
        if self.total_steps < 0 or self.epsilon < 0:
            raise ValueError("total_steps and epsilon must be non-negative")
        if not 0.0 <= self.eps_ramp_start <= self.eps_ramp_end <= 1.0:
            raise ValueError("ramp fractions must satisfy 0 <= start <= end <= 1")
        self.hidden = tuple(int(h) for h in self.hidden)


def explore_rate(cfg: DqnConfig, t: int) -> float:
    """Linear decay from ``explore_start`` to ``explore_end``."""
    horizon = max(1.0, cfg.explore_fraction * cfg.total_steps)
    frac = min(1.0, t / horizon)
    return cfg.explore_start + frac * (cfg.explore_end - cfg.explore_start)


def epsilon_schedule(cfg: DqnConfig, t: int) -> float:
    """Cubic smooth-step from 0 to ``epsilon`` between the ramp fractions,
    flat afterwards."""
    t0 = cfg.eps_ramp_start * cfg.total_steps
    t1 = cfg.eps_ramp_end * cfg.total_steps
    if t <= t0:
        return 0.0 if t1 > t0 else cfg.epsilon
    if t >= t1:
        return cfg.epsilon
    u = (t - t0) / (t1 - t0)
    return cfg.epsilon * u * u * (3.0 - 2.0 * u)


# --- targets and loss --------------------------------------------------------------------

def td_target(batch: Batch, online: MlpNet, target: MlpNet, gamma: float, double: bool = True) -> np.ndarray:
    q_next = target(batch.s_next)
    if double:
        a_star = np.argmax(online(batch.s_next), axis=1)
    else:
        a_star = np.argmax(q_next, axis=1)
    boot = q_next[np.arange(len(batch)), a_star]
    return batch.r + gamma * np.where(batch.done, 0.0, boot)


def soft_weights(f, lam: float) -> np.ndarray:
    """Gibbs weights ``softmax(f / lam)``; ``lam = 0`` splits the mass over
    the maximizers, ``lam = inf`` is uniform."""
    f = np.asarray(f, dtype=float)
    if lam == 0:
        top = f == f.max()
        return top / top.sum()
    if math.isinf(lam):
        return np.full(f.shape, 1.0 / f.size)
    z = f / lam
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def soft_value(f, lam: float, p0=None) -> float:
    """``lam * ln E_{p0} exp(f / lam)``, the value of the KL-regularized
    maximization over distributions."""
    f = np.asarray(f, dtype=float)
    p0 = np.full(f.shape, 1.0 / f.size) if p0 is None else np.asarray(p0, dtype=float)
    if lam == 0:
        return float(f[p0 > 0].max())
    return float(lam * logsumexp(f / lam, b=p0))


def huber(x, delta: float = 1.0):
    """Huber value and derivative."""
    ax = np.abs(x)
    val = np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))
    grad = np.clip(x, -delta, delta)
    return val, grad


def _penalty(resid, cfg: DqnConfig):
    if cfg.huber:
        return huber(resid, cfg.huber_delta)
    return np.abs(resid), np.sign(resid)


@dataclass
class CarLoss:
    loss: float
    weights: np.ndarray
    worst_td: np.ndarray
    grads: Optional[List[np.ndarray]] = None


def car_soft_loss(batch: Batch, online: MlpNet, target: MlpNet, cfg: DqnConfig, epsilon: float,
                  domain=None, y=None, s_adv=None, need_grad: bool = True) -> CarLoss:
    """``sum_i alpha_i * penalty(worst residual_i)`` with ``alpha =
    soft_weights(f, lambda)`` held constant, ``f_i`` the worst absolute TD
    error over the ``epsilon`` box.

    ``s_adv`` freezes the PGD inner solution (for gradient checks)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if y is None:
        y = td_target(batch, online, target, cfg.gamma, cfg.double)
    rows = np.arange(len(batch))
    a = batch.a
    use_ibp = cfg.solver == "ibp" and epsilon > 0 and s_adv is None
    if use_ibp:
        lo, hi = input_box(batch.s, epsilon, domain)
        box, cache = online.ibp(lo, hi, return_cache=True)
        r_up = box.upper[rows, a] - y
        r_lo = box.lower[rows, a] - y
        pick_up = np.abs(r_up) >= np.abs(r_lo)
        resid = np.where(pick_up, r_up, r_lo)
    else:
        if s_adv is None:
            if epsilon > 0:
                acfg = atk.AttackConfig(epsilon, steps=cfg.attack_steps, domain=domain)
                s_adv = atk.car_dqn_inner_max(online, y, batch.s, a, acfg, "pgd").s_adv
            else:
                s_adv = batch.s
        q, cache = online.forward(s_adv, return_cache=True)
        resid = q[rows, a] - y
    f = np.abs(resid)
    alpha = soft_weights(f, cfg.lambda_soft)
    pen, dpen = _penalty(resid, cfg)
    loss = float(np.sum(alpha * pen))
    if not need_grad:
        return CarLoss(loss, alpha, f)
    coef = alpha * dpen
    if cfg.alpha_gradient and 0 < cfg.lambda_soft < math.inf:
        # d alpha_i / d f_j = alpha_i (delta_ij - alpha_j) / lambda
        coef = coef + alpha * (pen - loss) / cfg.lambda_soft * np.sign(resid)
    if use_ibp:
        d_up = np.zeros_like(box.upper)
        d_lo = np.zeros_like(box.lower)
        d_up[rows, a] = np.where(pick_up, coef, 0.0)
        d_lo[rows, a] = np.where(pick_up, 0.0, coef)
        grads = online.ibp_backward(cache, d_lo, d_up)
    else:
        g = np.zeros((len(batch), online.out_dim))
        g[rows, a] = coef
        grads = online.backward(cache, g)
    return CarLoss(loss, alpha, f, grads)


# --- training ------------------------------------------------------------------------------

@dataclass
class DqnLogRow:
    step: int
    natural_return: float
    attacked_return: float
    loss: float
    epsilon: float


@dataclass
class DqnResult:
    net: MlpNet
    log: List[DqnLogRow] = field(default_factory=list)
    config: Optional[DqnConfig] = None


def make_q_net(obs_dim: int, n_actions: int, cfg: DqnConfig, seed: int) -> MlpNet:
    return MlpNet(obs_dim, cfg.hidden, n_actions, head="dueling" if cfg.dueling else "plain", seed=seed)


def train_car_dqn(env, cfg: DqnConfig, seed: int = 0, eval_env_factory: Optional[Callable] = None,
                  callback: Optional[Callable] = None) -> DqnResult:
    """Epsilon-greedy acting on the true observation, uniform replay, soft
    CAR loss, Adam, periodic hard target sync.

    Random streams: network init uses ``seed``; acting and replay sampling
    use ``default_rng([seed, 1])`` and ``default_rng([seed, 2])``; the
    environment is reset with ``seed`` once and then runs on its own stream.
    """
    online = make_q_net(env.obs_dim, env.n_actions, cfg, seed)
    target = online.copy()
    opt = AdamState.for_net(online, lr=cfg.lr)
    buf = ReplayBuffer(min(cfg.buffer_capacity, max(1, cfg.total_steps)), env.obs_dim)
    rng_act = np.random.default_rng([seed, 1])
    rng_buf = np.random.default_rng([seed, 2])
    domain = (env.obs_low, env.obs_high)
    result = DqnResult(online, [], cfg)
    obs = env.reset(seed=seed)
    last_loss = float("nan")
    for t in range(cfg.total_steps):
        if rng_act.random() < explore_rate(cfg, t):
            a = int(rng_act.integers(env.n_actions))
        else:
            a = int(np.argmax(online(obs)))
        res = env.step(a)
        buf.add(obs, a, res.reward, res.observation, res.done)
        obs = env.reset() if res.finished else res.observation

        if t >= cfg.learning_starts and t % cfg.train_freq == 0:
            batch = buf.sample(cfg.batch_size, rng_buf)
            out = car_soft_loss(batch, online, target, cfg, epsilon_schedule(cfg, t), domain)
            adam_step(online, out.grads, opt)
            last_loss = out.loss
        if (t + 1) % cfg.target_update == 0:
            target.set_params(online.params())
        if eval_env_factory is not None and cfg.eval_interval and (t + 1) % cfg.eval_interval == 0:
            row = _evaluate_row(online, eval_env_factory, cfg, t + 1, last_loss, seed)
            result.log.append(row)
            if callback is not None:
                callback(row)
    return result


def _evaluate_row(net: MlpNet, env_factory, cfg: DqnConfig, step: int, loss: float, seed: int) -> DqnLogRow:
    agent = DqnAgent(net)
    probe = env_factory()
    acfg = atk.AttackConfig(cfg.epsilon, steps=cfg.attack_steps, domain=(probe.obs_low, probe.obs_high))
    eval_seed = seed * 1_000_003 + 17
    nat = mean_return(evaluate(agent, env_factory, "none", acfg, cfg.eval_episodes, eval_seed))
    adv = mean_return(evaluate(agent, env_factory, cfg.eval_attack, acfg, cfg.eval_episodes, eval_seed))
    return DqnLogRow(step, nat, adv, loss, epsilon_schedule(cfg, step))


# --- surrogate gap on the tabular embedding -------------------------------------------------

@dataclass
class SurrogateGap:
    l_car: float
    l_train: float
    l_diff: float
    bound: float
    l_tb: float
    m_visit: float

    @property
    def sandwich_holds(self) -> bool:
        tol = 1e-12 * max(1.0, self.l_train + self.l_diff)
        return abs(self.l_train - self.l_diff) <= self.l_car + tol and self.l_car <= self.l_train + self.l_diff + tol

    @property
    def diff_bound_holds(self) -> bool:
        return self.l_diff <= self.bound * (1.0 + 1e-12) + 1e-15


def surrogate_gap_probe(net: MlpNet, env, eps: float) -> SurrogateGap:
    """Evaluate the CAR objective, its training surrogate and their gap on
    the exact tabular model of ``env``.

    ``Q`` is the network on the state observations, with terminal (and
    wall) rows set to zero to match the absorbing tabular model; ``d`` is the
    discounted occupancy of the greedy policy. The inner maxima range over
    every tabular state in the ``eps`` box.
    """
    if not hasattr(env, "tabularize"):
        raise TypeError("the probe needs an environment with exact rewards and transitions")
    try:
        mdp, coords = env.tabularize()
    except TypeError as exc:
        raise TypeError("the probe needs an environment with exact rewards and transitions") from exc
    q = np.atleast_2d(net(coords)).astype(float)
    if hasattr(env, "terminal_mask"):
        dead = env.terminal_mask()
        if hasattr(env, "walls"):
            dead = dead | np.array([c in env.walls for c in env.cells])
        q[dead] = 0.0
    tq = bellman_apply(q, mdp)
    d = visitation_distribution(mdp, np.argmax(q, axis=1)).d
    b = perturbation_set(coords, eps, "L_inf")
    rows = b.row_ids()
    nb = b.indices
    starts = b.indptr[:-1]

    def weighted_sup(diff):
        inner = np.maximum.reduceat(np.abs(diff), starts, axis=0)
        return float(np.max(d * inner))

    l_car = weighted_sup(tq[nb] - q[nb])
    l_train = weighted_sup(tq[rows] - q[nb])
    l_diff = weighted_sup(tq[nb] - tq[rows])
    consts = smoothness_constants(mdp, b, q)
    m_visit = float(d.max())
    return SurrogateGap(l_car, l_train, l_diff, consts.l_tcar * m_visit * eps, consts.l_tcar, m_visit)
