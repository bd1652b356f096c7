"""Consistent adversarial robust PPO for continuous actions: GAE, the
clipped surrogate, value regression and the soft CAR robustness term."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import attacks as atk
from .car_dqn import soft_weights
from .evaluation import PpoAgent, evaluate, mean_return
from .tinynet import (AdamState, MlpNet, adam_step, add_grads, gaussian_entropy,
                      gaussian_log_prob)


@dataclass
class PpoConfig:
    """``beta`` is the entropy temperature of the CAR term (its coefficient
    is ``1/beta``; ``inf`` drops the entropy)."""

    eta: float = 0.2
    beta: float = math.inf
    kappa: float = 0.3
    lambda_soft: float = 100.0
    gamma: float = 0.99
    lambda_gae: float = 0.95
    rollout_steps: int = 2048
    epochs: int = 10
    minibatch_size: int = 64
    iterations: int = 300
    lr: float = 3e-4
    value_lr: float = 1e-3
    hidden: tuple = (64, 64)
    log_std_init: float = -0.5
    epsilon: float = 0.1
    eps_ramp: float = 0.75
    solver: str = "pgd"
    attack_steps: int = 10
    sgld_temperature: float = 1e-5
    normalize_advantages: bool = True
    eval_interval: int = 10
    eval_episodes: int = 5

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if not self.lambda_soft > 0:
            raise ValueError("lambda_soft must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.solver not in ("pgd", "sgld"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.rollout_steps < 1 or self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("rollout_steps, epochs and minibatch_size must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def entropy_coef(self) -> float:
        return 0.0 if math.isinf(self.beta) else 1.0 / self.beta


def linear_epsilon(cfg: PpoConfig, iteration: int) -> float:
    ramp = cfg.eps_ramp * cfg.iterations
    if ramp <= 0:
        return cfg.epsilon
    return cfg.epsilon * min(1.0, iteration / ramp)


# --- rollouts --------------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    log_probs: np.ndarray
    boundaries: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    episode_returns: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)


def compute_gae(rewards, values, next_values, boundaries, gamma: float, lambda_gae: float):
    """GAE(lambda) with the recursion cut at episode boundaries;
    ``next_values`` already holds zero after a true terminal state."""
    rewards = np.asarray(rewards, dtype=float)
    delta = rewards + gamma * np.asarray(next_values, dtype=float) - np.asarray(values, dtype=float)
    adv = np.zeros_like(delta)
    run = 0.0
    for t in range(len(delta) - 1, -1, -1):
        if boundaries[t]:
            run = 0.0
        run = delta[t] + gamma * lambda_gae * run
        adv[t] = run
    return adv, adv + values


def collect_rollout(env, policy: MlpNet, value: MlpNet, n_steps: int, rng: np.random.Generator,
                    state: dict) -> RolloutBuffer:
    """``state`` carries the live observation and running episode return
    across iterations."""
    d = env.obs_dim
    obs = np.zeros((n_steps, d))
    acts = np.zeros((n_steps, env.act_dim))
    rews = np.zeros(n_steps)
    nxt = np.zeros((n_steps, d))
    term = np.zeros(n_steps, dtype=bool)
    bound = np.zeros(n_steps, dtype=bool)
    finished = []
    o = state["obs"]
    std = np.exp(policy.log_std)
    for t in range(n_steps):
        mean = policy(o)
        a = mean + std * rng.standard_normal(mean.shape)
        res = env.step(a)
        obs[t], acts[t], rews[t], nxt[t] = o, a, res.reward, res.observation
        term[t] = res.done
        bound[t] = res.finished
        state["ret"] += res.reward
        if res.finished:
            finished.append(state["ret"])
            state["ret"] = 0.0
            o = env.reset()
        else:
            o = res.observation
    bound[-1] = True
    state["obs"] = o
    vals = value(obs)[:, 0]
    next_vals = np.where(term, 0.0, value(nxt)[:, 0])
    lp, _, _ = gaussian_log_prob(acts, policy(obs), policy.log_std)
    return RolloutBuffer(obs, acts, rews, vals, next_vals, lp, bound, episode_returns=finished)


# --- losses ------------------------------------------------------------------------------

@dataclass
class LossOut:
    loss: float
    grads: Optional[List[np.ndarray]] = None
    weights: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = None


def _ratio_terms(policy: MlpNet, obs, actions, old_log_probs):
    mean, cache = policy.forward(obs, return_cache=True)
    lp, d_mean, d_log_std = gaussian_log_prob(actions, mean, policy.log_std)
    ratio = np.exp(lp - old_log_probs)
    return ratio, cache, d_mean, d_log_std


def _surrogate_grads(policy, cache, ratio, adv, coef, d_mean, d_log_std, eta):
    """Gradients of ``sum_i coef_i * (-g(ratio_i, adv_i))``."""
    dg = -coef * atk.g_clip_grad(ratio, adv, eta) * ratio
    return policy.backward(cache, dg[:, None] * d_mean, log_std_grad=dg @ d_log_std)


def ppo_clip_loss(obs, actions, adv, policy: MlpNet, old_log_probs, eta: float,
                  need_grad: bool = True) -> LossOut:
    """``mean(-g(ratio, adv))``."""
    ratio, cache, d_mean, d_log_std = _ratio_terms(policy, obs, actions, old_log_probs)
    vals = -atk.g_clip(ratio, adv, eta)
    loss = float(np.mean(vals))
    if not need_grad:
        return LossOut(loss)
    coef = np.full(len(vals), 1.0 / len(vals))
    return LossOut(loss, _surrogate_grads(policy, cache, ratio, adv, coef, d_mean, d_log_std, eta))


def car_ppo_soft_loss(obs, actions, adv, policy: MlpNet, old_policy: MlpNet, old_log_probs,
                      cfg: PpoConfig, epsilon: float, domain=None, s_adv=None, rng=None,
                      need_grad: bool = True) -> LossOut:
    """``sum_i alpha_i f_i`` with ``f_i = -H/beta - min_{s_nu} g(ratio, adv)``
    and ``alpha = soft_weights(f, lambda)`` held constant.

    The adversarial observations are solved once at the current parameters
    (or supplied via ``s_adv``) and treated as fixed when differentiating.
    """
    if len(obs) == 0:
        raise ValueError("empty minibatch")
    if s_adv is None:
        if epsilon > 0:
            acfg = atk.AttackConfig(epsilon, steps=cfg.attack_steps, domain=domain,
                                    sgld_temperature=cfg.sgld_temperature)
            s_adv, _ = atk.car_ppo_inner_min(policy, old_policy, obs, actions, adv, cfg.eta, acfg,
                                             cfg.solver, old_log_probs, rng=rng)
        else:
            s_adv = obs
    ratio, cache, d_mean, d_log_std = _ratio_terms(policy, s_adv, actions, old_log_probs)
    ent, d_ent = gaussian_entropy(policy.log_std)
    f = -cfg.entropy_coef * ent - atk.g_clip(ratio, adv, cfg.eta)
    alpha = soft_weights(f, cfg.lambda_soft)
    loss = float(np.sum(alpha * f))
    if not need_grad:
        return LossOut(loss, None, alpha, f)
    grads = _surrogate_grads(policy, cache, ratio, adv, alpha, d_mean, d_log_std, cfg.eta)
    grads[-1] = grads[-1] - cfg.entropy_coef * d_ent * alpha.sum()
    return LossOut(loss, grads, alpha, f)


def value_loss(obs, returns, value: MlpNet, need_grad: bool = True) -> LossOut:
    pred, cache = value.forward(obs, return_cache=True)
    err = pred[:, 0] - returns
    loss = float(np.mean(err * err))
    if not need_grad:
        return LossOut(loss)
    return LossOut(loss, value.backward(cache, (2.0 / len(err)) * err[:, None]))


# --- training ------------------------------------------------------------------------------

@dataclass
class PpoLogRow:
    iteration: int
    natural_return: float
    attacked_return: float
    policy_loss: float
    car_loss: float
    value_loss: float
    epsilon: float


@dataclass
class PpoResult:
    policy: MlpNet
    value: MlpNet
    log: List[PpoLogRow] = field(default_factory=list)
    config: Optional[PpoConfig] = None


def make_nets(env, cfg: PpoConfig, seed: int):
    policy = MlpNet(env.obs_dim, cfg.hidden, env.act_dim, head="gaussian", seed=seed,
                    log_std_init=cfg.log_std_init)
    value = MlpNet(env.obs_dim, cfg.hidden, 1, head="plain", seed=seed + 1)
    return policy, value


def train_car_ppo(env, cfg: PpoConfig, seed: int = 0, eval_env_factory: Optional[Callable] = None,
                  callback: Optional[Callable] = None) -> PpoResult:
    """Per iteration: one rollout, GAE, then ``epochs`` passes of shuffled
    minibatches on ``L_PPO + kappa * L_car_soft`` and the value MSE.

    Random streams: policy init ``seed``, value init ``seed + 1``; action
    noise ``default_rng([seed, 3])``, minibatch shuffling
    ``default_rng([seed, 4])``, inner solver ``default_rng([seed, 5])``.
    """
    policy, value = make_nets(env, cfg, seed)
    p_opt = AdamState.for_net(policy, lr=cfg.lr)
    v_opt = AdamState.for_net(value, lr=cfg.value_lr)
    rng_act = np.random.default_rng([seed, 3])
    rng_mb = np.random.default_rng([seed, 4])
    rng_inner = np.random.default_rng([seed, 5])
    domain = (env.obs_low, env.obs_high)
    live = {"obs": env.reset(seed=seed), "ret": 0.0}
    result = PpoResult(policy, value, [], cfg)
    for it in range(cfg.iterations):
        eps = linear_epsilon(cfg, it)
        roll = collect_rollout(env, policy, value, cfg.rollout_steps, rng_act, live)
        adv_all, ret_all = compute_gae(roll.rewards, roll.values, roll.next_values, roll.boundaries,
                                       cfg.gamma, cfg.lambda_gae)
        roll.advantages, roll.returns = adv_all, ret_all
        old_policy = policy.copy()
        n = len(roll)
        pl = cl = vl = 0.0
        count = 0
        for _ in range(cfg.epochs):
            order = rng_mb.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                obs, acts, olp = roll.obs[idx], roll.actions[idx], roll.log_probs[idx]
                adv = adv_all[idx]
                if cfg.normalize_advantages and len(idx) > 1:
                    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
                ppo = ppo_clip_loss(obs, acts, adv, policy, olp, cfg.eta)
                grads = ppo.grads
                if cfg.kappa > 0:
                    car = car_ppo_soft_loss(obs, acts, adv, policy, old_policy, olp, cfg, eps,
                                            domain, rng=rng_inner)
                    grads = add_grads(grads, car.grads, cfg.kappa)
                    cl += car.loss
                adam_step(policy, grads, p_opt)
                vloss = value_loss(obs, ret_all[idx], value)
                adam_step(value, vloss.grads, v_opt)
                pl += ppo.loss
                vl += vloss.loss
                count += 1
        if eval_env_factory is not None and cfg.eval_interval and (it + 1) % cfg.eval_interval == 0:
            nat, adv_ret = _evaluate(policy, value, eval_env_factory, cfg, seed)
            row = PpoLogRow(it + 1, nat, adv_ret, pl / count, cl / count, vl / count, eps)
            result.log.append(row)
            if callback is not None:
                callback(row)
    return result


def _evaluate(policy, value, env_factory, cfg: PpoConfig, seed: int):
    probe = env_factory()
    agent = PpoAgent(policy, value, cfg.gamma, probe.act_low, probe.act_high)
    acfg = atk.AttackConfig(cfg.epsilon, steps=cfg.attack_steps, domain=(probe.obs_low, probe.obs_high))
    eval_seed = seed * 1_000_003 + 29
    nat = mean_return(evaluate(agent, env_factory, "none", acfg, cfg.eval_episodes, eval_seed))
    mad = mean_return(evaluate(agent, env_factory, "mad", acfg, cfg.eval_episodes, eval_seed))
    return nat, mad
