"""Episode rollouts under observation attacks, shared by training logs and
the command-line evaluator."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import attacks as atk
from .tinynet import MlpNet, ibp_bounds


@dataclass
class DqnAgent:
    net: MlpNet

    kind = "dqn"

    def act(self, obs) -> int:
        return int(np.argmax(self.net(obs)))


@dataclass
class PpoAgent:
    policy: MlpNet
    value: MlpNet
    gamma: float = 0.99
    act_low: Optional[np.ndarray] = None
    act_high: Optional[np.ndarray] = None

    kind = "ppo"

    def act(self, obs) -> np.ndarray:
        mean = self.policy(obs)
        if self.act_low is not None:
            mean = np.clip(mean, self.act_low, self.act_high)
        return mean


@dataclass
class EpisodeResult:
    ret: float
    steps: int
    states: list = field(default_factory=list)
    observations: list = field(default_factory=list)


def run_episode(env, act: Callable, perturb: Optional[Callable] = None, seed: Optional[int] = None,
                start=None, record: bool = False) -> EpisodeResult:
    """Undiscounted return of one episode. ``perturb`` rewrites the
    observation the agent sees; the environment keeps the true state."""
    obs = env.reset(seed=seed, start=start)
    total, steps = 0.0, 0
    states, seen = [], []
    while True:
        if record:
            states.append(env.state)
            seen.append(np.array(obs, copy=True))
        view = perturb(obs) if perturb is not None else obs
        res = env.step(act(view))
        total += res.reward
        steps += 1
        obs = res.observation
        if res.finished:
            break
    return EpisodeResult(total, steps, states, seen)


def make_perturber(agent, attack: str, cfg: atk.AttackConfig, rng: np.random.Generator, env=None):
    if attack == "none" or cfg.epsilon == 0.0:
        return None
    if agent.kind == "dqn":
        if attack not in atk.DISCRETE_ATTACKS:
            raise TypeError(f"attack {attack!r} does not apply to a DQN agent")
        if attack == "random":
            return lambda o: atk.random_attack(o, cfg, rng=rng)
        if attack in ("pgd", "minbest"):
            return lambda o: atk.minbest_attack(agent.net, o, cfg)
        return lambda o: atk.critic_attack(agent.net, agent.net, o, cfg)
    if attack not in atk.CONTINUOUS_ATTACKS:
        raise TypeError(f"attack {attack!r} does not apply to a PPO agent")
    if attack == "random":
        return lambda o: atk.random_attack(o, cfg, rng=rng)
    if attack == "mad":
        return lambda o: atk.mad_attack(agent.policy, o, cfg, rng=rng)
    if env is None:
        raise ValueError("the PPO critic attack needs the environment model")
    critic = atk.model_critic(env, agent.value, agent.gamma)
    return lambda o: atk.critic_attack(critic, agent.policy, o, cfg)


def episode_seeds(seed: int, n: int) -> List[int]:
    """Per-episode seeds from a splittable counter; independent of how the
    episodes are later scheduled."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def evaluate(agent, env_factory: Callable, attack: str, cfg: atk.AttackConfig, episodes: int,
             seed: int = 0, threads: int = 1, record: bool = False) -> List[EpisodeResult]:
    seeds = episode_seeds(seed, episodes)

    def one(ep_seed):
        env = env_factory()
        ep_cfg = atk.AttackConfig(**{**cfg.__dict__, "seed": ep_seed})
        perturb = make_perturber(agent, attack, ep_cfg, np.random.default_rng(ep_seed), env)
        return run_episode(env, agent.act, perturb, seed=ep_seed, record=record)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


def mean_return(results: List[EpisodeResult]) -> float:
    return float(np.mean([r.ret for r in results])) if results else 0.0


def action_certification_rate(net: MlpNet, observations, eps: float, domain=None) -> float:
    """Fraction of observations whose greedy action's IBP lower bound beats
    every other action's upper bound over the ``eps`` box."""
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    if len(obs) == 0:
        return 0.0
    greedy = np.argmax(net(obs), axis=1)
    box = ibp_bounds(net, obs, eps, domain)
    rows = np.arange(len(obs))
    lower = box.lower[rows, greedy]
    upper = box.upper.copy()
    upper[rows, greedy] = -np.inf
    return float(np.mean(lower > upper.max(axis=1)))
