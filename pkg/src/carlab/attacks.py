"""Observation-perturbation adversaries and the CAR inner-problem solvers.

Every attack works on a batch of observations ``(n, d)`` (a single ``(d,)``
observation is accepted and returned with the same shape). Objectives are
callables ``s -> (value (n,), grad (n, d))``; the solvers keep the best
iterate per sample, starting from the clean observation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple

import numpy as np

from .tinynet import Interval, MlpNet, gaussian_log_prob, input_box

Objective = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class AttackConfig:
    """Budget and solver settings. ``step_size`` defaults to
    ``epsilon / steps``; ``domain`` is an optional ``(low, high)`` box that
    every perturbed observation must stay in."""

    epsilon: float
    steps: int = 10
    step_size: Optional[float] = None
    metric: str = "L_inf"
    seed: int = 0
    sgld_temperature: float = 1e-5
    random_start: bool = False
    domain: Optional[tuple] = None
    softmax_temperature: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.metric != "L_inf":
            raise ValueError("only L_inf budgets are supported")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / self.steps

    def with_epsilon(self, eps: float) -> "AttackConfig":
        return replace(self, epsilon=float(eps))


def _batch(s) -> Tuple[np.ndarray, bool]:
    s = np.asarray(s, dtype=float)
    if s.ndim == 1:
        return s[None, :].copy(), True
    return s.copy(), False


def _unbatch(x, squeeze):
    return x[0] if squeeze else x


def project(s: np.ndarray, s0: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    lo, hi = input_box(s0, cfg.epsilon, cfg.domain)
    return np.minimum(np.maximum(s, lo), hi)


def _sign_of(direction: str) -> float:
    if direction not in ("maximize", "minimize"):
        raise ValueError("direction must be 'maximize' or 'minimize'")
    return 1.0 if direction == "maximize" else -1.0


def _ascent(objective: Objective, s0, cfg: AttackConfig, direction: str, noise_scale: float,
            rng: Optional[np.random.Generator], score: Optional[Callable] = None):
    x0, squeeze = _batch(s0)
    sgn = _sign_of(direction)
    if cfg.epsilon == 0.0:
        val, _ = objective(x0)
        best_val = score(x0) if score is not None else val
        return _unbatch(x0, squeeze), _unbatch(np.asarray(best_val), squeeze)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    s = x0
    if cfg.random_start:
        s = project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, x0.shape), x0, cfg)
    best_s = x0.copy()
    val0, _ = objective(x0)
    best = sgn * np.asarray(score(x0) if score is not None else val0, dtype=float)
    for _ in range(cfg.steps):
        val, grad = objective(s)
        cur = sgn * np.asarray(score(s) if score is not None else val, dtype=float)
        better = cur > best
        best = np.where(better, cur, best)
        best_s[better] = s[better]
        step = sgn * cfg.alpha * np.sign(grad)
        if noise_scale > 0:
            step = step + noise_scale * rng.standard_normal(s.shape)
        s = project(s + step, x0, cfg)
    val, _ = objective(s)
    cur = sgn * np.asarray(score(s) if score is not None else val, dtype=float)
    better = cur > best
    best = np.where(better, cur, best)
    best_s[better] = s[better]
    return _unbatch(best_s, squeeze), _unbatch(sgn * best, squeeze)


def pgd(objective: Objective, s0, cfg: AttackConfig, direction: str = "maximize",
        rng: Optional[np.random.Generator] = None, score: Optional[Callable] = None):
    """Projected sign-gradient steps; returns ``(best iterate, best value)``.

    ``score`` (optional) replaces the objective value when ranking iterates,
    for attacks whose differentiable surrogate differs from the quantity
    that matters."""
    return _ascent(objective, s0, cfg, direction, 0.0, rng, score)


def sgld(objective: Objective, s0, cfg: AttackConfig, direction: str = "maximize",
         rng: Optional[np.random.Generator] = None, score: Optional[Callable] = None):
    """PGD plus Gaussian noise of scale ``sqrt(2 * alpha * beta)`` per step."""
    noise = float(np.sqrt(2.0 * cfg.alpha * cfg.sgld_temperature))
    return _ascent(objective, s0, cfg, direction, noise, rng, score)


SOLVERS = {"pgd": pgd, "sgld": sgld}


# --- discrete-action attacks ------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_actions(q_net: MlpNet, s) -> np.ndarray:
    q = np.atleast_2d(q_net(s))
    return np.argmax(q, axis=1)


def cross_entropy_objective(q_net: MlpNet, labels: np.ndarray, temperature: float = 1.0) -> Objective:
    """``-log softmax(Q(s)/T)[label]`` and its input gradient."""
    labels = np.asarray(labels)

    def obj(s):
        q, cache = q_net.forward(s, return_cache=True)
        p = _softmax(q / temperature)
        rows = np.arange(len(labels))
        val = -np.log(np.maximum(p[rows, labels], 1e-300))
        g = p.copy()
        g[rows, labels] -= 1.0
        _, dx = q_net.backward(cache, g / temperature, need_input_grad=True)
        return val, dx

    return obj


def minbest_attack(q_net: MlpNet, s0, cfg: AttackConfig):
    """Push down the softmax probability of the clean greedy action."""
    x0, squeeze = _batch(s0)
    labels = greedy_actions(q_net, x0)
    s_adv, _ = pgd(cross_entropy_objective(q_net, labels, cfg.softmax_temperature), x0, cfg, "maximize")
    return _unbatch(s_adv, squeeze)


def pgd_attack(q_net: MlpNet, s0, cfg: AttackConfig):
    """Untargeted PGD against the clean greedy label (cross-entropy on Q
    logits). Under sign-gradient steps this follows the same iterates as
    :func:`minbest_attack`; the name is kept for the evaluation tables."""
    return minbest_attack(q_net, s0, cfg)


def critic_attack(critic, policy, s0, cfg: AttackConfig):
    """Steer the policy towards the action its critic rates lowest at the
    true observation.

    DQN form: ``policy`` and ``critic`` are Q networks; the differentiable
    surrogate is the softmax-weighted critic value ``sum_a p_a(s) Q_c(s0, a)``
    and iterates are ranked by ``Q_c(s0, argmax_a Q(s, a))``.

    PPO form: ``policy`` has a Gaussian head and ``critic(s0, a)`` returns
    ``(value, d value / d a)``; the objective is ``critic(s0, mean(s))``.
    """
    x0, squeeze = _batch(s0)
    if isinstance(policy, MlpNet) and policy.head == "gaussian":
        if isinstance(critic, MlpNet):
            raise TypeError("the Gaussian-policy critic attack needs an action-value callable")

        def obj(s):
            mean, cache = policy.forward(s, return_cache=True)
            val, dq_da = critic(x0, mean)
            _, dx = policy.backward(cache, dq_da, need_input_grad=True)
            return val, dx

        s_adv, _ = pgd(obj, x0, cfg, "minimize")
        return _unbatch(s_adv, squeeze)

    if not isinstance(critic, MlpNet) or critic.head == "gaussian":
        raise TypeError("the discrete critic attack needs a Q network critic")
    c0 = np.atleast_2d(critic(x0))
    rows = np.arange(len(x0))
    t = cfg.softmax_temperature

    def obj(s):
        q, cache = policy.forward(s, return_cache=True)
        p = _softmax(q / t)
        val = np.sum(p * c0, axis=1)
        g = p * (c0 - val[:, None]) / t
        _, dx = policy.backward(cache, g, need_input_grad=True)
        return val, dx

    def score(s):
        return c0[rows, greedy_actions(policy, s)]

    s_adv, _ = pgd(obj, x0, cfg, "minimize", score=score)
    return _unbatch(s_adv, squeeze)


def random_attack(s0, cfg: AttackConfig, seed: Optional[int] = None, rng=None):
    """Uniform sample from the budget box intersected with the domain."""
    x0, squeeze = _batch(s0)
    if rng is None:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
    lo, hi = input_box(x0, cfg.epsilon, cfg.domain)
    return _unbatch(lo + (hi - lo) * rng.random(x0.shape), squeeze)


# --- continuous-action attacks ---------------------------------------------------------

def mad_attack(policy_net: MlpNet, s0, cfg: AttackConfig, solver: str = "pgd", rng=None):
    """Maximize ``KL(pi(.|s0) || pi(.|s))``; for the shared-scale Gaussian
    head the divergence is a scaled squared distance between means. The KL
    gradient vanishes at ``s0``, so iterates start from a random point in
    the box regardless of ``cfg.random_start``."""
    if policy_net.head != "gaussian":
        raise TypeError("MAD needs a stochastic (Gaussian) policy")
    x0, squeeze = _batch(s0)
    m0 = np.atleast_2d(policy_net(x0))
    inv_var = np.exp(-2.0 * policy_net.log_std)

    def obj(s):
        m, cache = policy_net.forward(s, return_cache=True)
        diff = m - m0
        val = 0.5 * np.sum(diff * diff * inv_var, axis=1)
        _, dx = policy_net.backward(cache, diff * inv_var, need_input_grad=True)
        return val, dx

    s_adv, _ = SOLVERS[solver](obj, x0, replace(cfg, random_start=True), "maximize", rng=rng)
    return _unbatch(s_adv, squeeze)


def model_critic(env, value_net: MlpNet, gamma: float, fd_step: float = 1e-5):
    """One-step lookahead ``Q(s, a) = r(s, a) + gamma V(f(s, a))`` for an env
    whose ``dynamics`` and ``reward`` broadcast over a batch; the action
    gradient is a central difference (actions are low dimensional)."""

    def q_of(s, a):
        nxt = env.dynamics(s, a)
        return np.atleast_1d(env.reward(s, a)) + gamma * value_net(nxt)[:, 0]

    def critic(s, a):
        s = np.atleast_2d(s)
        a = np.clip(np.atleast_2d(a), env.act_low, env.act_high)
        val = q_of(s, a)
        grad = np.zeros_like(a)
        for j in range(a.shape[1]):
            e = np.zeros(a.shape[1])
            e[j] = fd_step
            grad[:, j] = (q_of(s, a + e) - q_of(s, a - e)) / (2.0 * fd_step)
        return val, grad

    return critic


# --- clipped surrogate --------------------------------------------------------------------

def g_clip(x, y, eta: float):
    """``min(x y, clip(x, 1-eta, 1+eta) y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.minimum(x * y, np.clip(x, 1.0 - eta, 1.0 + eta) * y)


def g_clip_grad(x, y, eta: float):
    """``dg/dx``; on a tie between the two arguments the unclipped branch is
    used."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    unclipped = x * y <= np.clip(x, 1.0 - eta, 1.0 + eta) * y
    inside = (x > 1.0 - eta) & (x < 1.0 + eta)
    return np.where(unclipped | inside, y, 0.0)


# --- CAR inner problems -----------------------------------------------------------------------

@dataclass
class InnerMax:
    worst_abs_td: np.ndarray
    s_adv: Optional[np.ndarray] = None
    interval: Optional[Interval] = None


def car_dqn_inner_max(q_net: MlpNet, target_y, s, a, cfg: AttackConfig, solver: str = "pgd") -> InnerMax:
    """``max_{s_nu in B(s)} |y - Q(s_nu, a)|``: a lower estimate from PGD or
    a sound upper bound from IBP."""
    x0, squeeze = _batch(s)
    y = np.atleast_1d(np.asarray(target_y, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=int))
    rows = np.arange(len(x0))
    if solver == "ibp":
        lo, hi = input_box(x0, cfg.epsilon, cfg.domain)
        box = q_net.ibp(lo, hi)
        l_a, u_a = box.lower[rows, a], box.upper[rows, a]
        worst = np.maximum(np.abs(y - u_a), np.abs(y - l_a))
        return InnerMax(_unbatch(worst, squeeze), None, box)
    if solver != "pgd":
        raise ValueError(f"unknown solver {solver!r}")

    def obj(x):
        q, cache = q_net.forward(x, return_cache=True)
        resid = q[rows, a] - y
        g = np.zeros_like(q)
        g[rows, a] = np.sign(resid)
        _, dx = q_net.backward(cache, g, need_input_grad=True)
        return np.abs(resid), dx

    s_adv, val = pgd(obj, x0, cfg, "maximize")
    return InnerMax(_unbatch(np.asarray(val), squeeze), _unbatch(s_adv, squeeze), None)


def car_ppo_inner_min(policy_net: MlpNet, old_policy: MlpNet, s, a, advantage, eta: float,
                      cfg: AttackConfig, solver: str = "pgd", old_log_prob=None, rng=None):
    """``min_{s_nu in B(s)} g(pi(a|s_nu) / pi_old(a|s), A)``; returns
    ``(s_adv, g value)``."""
    x0, squeeze = _batch(s)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    adv = np.atleast_1d(np.asarray(advantage, dtype=float))
    if old_log_prob is None:
        old_log_prob, _, _ = gaussian_log_prob(a, np.atleast_2d(old_policy(x0)), old_policy.log_std)
    old_log_prob = np.atleast_1d(np.asarray(old_log_prob, dtype=float))
    if not np.all(np.isfinite(old_log_prob)):
        raise ValueError("old policy assigns zero density to the sampled action")
    log_std = policy_net.log_std

    def obj(x):
        mean, cache = policy_net.forward(x, return_cache=True)
        lp, d_mean, _ = gaussian_log_prob(a, mean, log_std)
        ratio = np.exp(lp - old_log_prob)
        val = g_clip(ratio, adv, eta)
        dg = g_clip_grad(ratio, adv, eta) * ratio
        _, dx = policy_net.backward(cache, dg[:, None] * d_mean, need_input_grad=True)
        return val, dx

    s_adv, val = SOLVERS[solver](obj, x0, cfg, "minimize", rng=rng)
    return _unbatch(s_adv, squeeze), _unbatch(np.asarray(val), squeeze)


DISCRETE_ATTACKS = ("none", "random", "pgd", "minbest", "critic")
CONTINUOUS_ATTACKS = ("none", "random", "mad", "critic")
