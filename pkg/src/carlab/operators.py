"""Bellman and CAR backups, fixed-point runs, and the norm machinery used to
measure Bellman errors (L^p norms, visitation-weighted seminorms, and
k-measurements between policies)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .mdp_core import (
    IntrinsicNeighborhood,
    PerturbationSet,
    TabularMdp,
    Visitation,
    argmax_sets,
    bellman_backup,
    policy_table,
)

Neighborhood = Union[PerturbationSet, IntrinsicNeighborhood]


def _as_p(p) -> float:
    p = float(p)
    if not p >= 1.0:
        raise ValueError(f"norm exponent must be >= 1, got {p}")
    return p


# --- operators ----------------------------------------------------------------

def bellman_apply(q: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != mdp.reward.shape:
        raise ValueError("Q shape does not match the MDP")
    return bellman_backup(q, mdp)


def adversarial_next_values(q: np.ndarray, b: Neighborhood) -> np.ndarray:
    """``min_{s_nu in B(s)} Q(s, argmax_a Q(s_nu, a))`` for every state."""
    greedy = np.argmax(q, axis=1)
    rows = b.row_ids()
    vals = q[rows, greedy[b.indices]]
    return np.minimum.reduceat(vals, b.indptr[:-1])


def car_apply(q: np.ndarray, mdp: TabularMdp, b: Neighborhood) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != mdp.reward.shape:
        raise ValueError("Q shape does not match the MDP")
    if b.n_states != mdp.n_states:
        raise ValueError("neighborhood size does not match the MDP")
    return mdp.reward + mdp.gamma * mdp.expect_next(adversarial_next_values(q, b))


def car_apply_setwise(q: np.ndarray, mdp: TabularMdp, b: Neighborhood, tol: float = 0.0) -> np.ndarray:
    """Variant that scores each perturbed state by the best action in its whole
    argmax set instead of the lowest-index representative. It agrees with
    :func:`car_apply` whenever every argmax set is a singleton."""
    q = np.asarray(q, dtype=float)
    opt = argmax_sets(q, tol)
    rows = b.row_ids()
    vals = np.where(opt[b.indices], q[rows], -np.inf).max(axis=1)
    inner = np.minimum.reduceat(vals, b.indptr[:-1])
    return mdp.reward + mdp.gamma * mdp.expect_next(inner)


def argmax_is_singleton(q: np.ndarray, tol: float = 0.0) -> np.ndarray:
    return argmax_sets(q, tol).sum(axis=1) == 1


# --- convergence constants ------------------------------------------------------

@dataclass
class SmoothnessConstants:
    l_r: float
    l_p: float
    m_q: float
    m_r: float
    gamma: float
    d_q0: float = 0.0
    epsilon: float = 0.0  # diameter of the perturbation balls

    def __post_init__(self):
        for name in ("l_r", "l_p", "m_q", "m_r", "d_q0", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def c_q(self) -> float:
        return max(self.m_q, self.m_r / (1.0 - self.gamma))

    @property
    def l_tcar(self) -> float:
        return self.l_r + self.gamma * self.c_q * self.l_p

    def bound(self, k: int, init_error: float) -> float:
        """Error bound for ``Q_{k+1}`` after ``k + 1`` CAR backups."""
        g = self.gamma
        return (g ** (k + 1) * (init_error + self.d_q0)
                + 2.0 * g * self.epsilon * self.l_tcar / (1.0 - g))


def _pair_distances(coords: np.ndarray, i: np.ndarray, j: np.ndarray, metric: str) -> np.ndarray:
    diff = np.abs(coords[i] - coords[j])
    return diff.max(axis=1) if metric == "L_inf" else np.sqrt((diff ** 2).sum(axis=1))


def _neighbor_pairs(b: Neighborhood, coords: np.ndarray, metric: str, pairs: str):
    rows = b.row_ids()
    cols = b.indices
    keep = rows != cols
    i, j = rows[keep], cols[keep]
    dist = _pair_distances(coords, i, j, metric)
    if pairs == "nearest" and dist.size:
        # on a uniform grid the chain of nearest neighbours realises every
        # distance, so the nearest-pair Lipschitz ratio bounds all pairs
        near = dist <= dist.min() * (1.0 + 1e-9)
        i, j, dist = i[near], j[near], dist[near]
    elif pairs != "all":
        raise ValueError(f"unknown pair mode {pairs!r}")
    return i, j, dist


def neighborhood_diameter(b: Neighborhood, coords: np.ndarray, metric: str) -> float:
    coords = np.asarray(coords, dtype=float).reshape(b.n_states, -1)
    pts = coords[b.indices]
    hi = np.maximum.reduceat(pts, b.indptr[:-1], axis=0)
    lo = np.minimum.reduceat(pts, b.indptr[:-1], axis=0)
    span = hi - lo
    if metric == "L_inf":
        return float(span.max())
    return float(np.sqrt((span ** 2).sum(axis=1)).max())


def initial_continuity(q0: np.ndarray, b: Neighborhood) -> float:
    """``D_{Q0} = 2 max_s max_{s_nu in B(s)} max_a |Q0(s,a) - Q0(s_nu,a)|``."""
    rows = b.row_ids()
    return 2.0 * float(np.max(np.abs(q0[rows] - q0[b.indices]))) if rows.size else 0.0


def smoothness_constants(mdp: TabularMdp, b: Neighborhood, q0: np.ndarray,
                         pairs: str = "all", chunk: int = 20000) -> SmoothnessConstants:
    """Lipschitz constants of r and P over the pairs linked by ``b`` (local
    smoothness inside the perturbation balls), plus the uniform bounds."""
    if mdp.state_coords is None:
        raise ValueError("smoothness constants need state coordinates")
    base = b.base if isinstance(b, IntrinsicNeighborhood) else b
    metric = base.metric
    coords = mdp.state_coords
    i, j, dist = _neighbor_pairs(b, coords, metric, pairs)
    l_r = l_p = 0.0
    if i.size:
        l_r = float(np.max(np.abs(mdp.reward[i] - mdp.reward[j]).max(axis=1) / dist))
        n_a = mdp.n_actions
        for a in range(n_a):
            p_a = mdp.transition[a::n_a]
            for start in range(0, i.size, chunk):
                sl = slice(start, start + chunk)
                tv = np.asarray(abs(p_a[i[sl]] - p_a[j[sl]]).sum(axis=1)).ravel()
                l_p = max(l_p, float(np.max(tv / dist[sl])))
    q0 = np.asarray(q0, dtype=float)
    return SmoothnessConstants(
        l_r=l_r, l_p=l_p,
        m_q=float(np.max(np.abs(q0))), m_r=float(np.max(np.abs(mdp.reward))),
        gamma=mdp.gamma, d_q0=initial_continuity(q0, b),
        epsilon=neighborhood_diameter(b, coords, metric),
    )


@dataclass
class FixedPointTrace:
    k: np.ndarray
    errors: np.ndarray
    bounds: np.ndarray
    final_q: np.ndarray
    constants: SmoothnessConstants
    history: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return bool(np.all(self.errors <= self.bounds))


def car_fixed_point_run(q0: np.ndarray, mdp: TabularMdp, b: Neighborhood, n_iters: int,
                        q_star: np.ndarray, constants: Optional[SmoothnessConstants] = None,
                        keep_history: bool = False) -> FixedPointTrace:
    """Iterate ``Q_{k+1} = T_car Q_k`` and record ``||Q_{k+1} - Q*||_inf``
    against the convergence bound for ``k = 0 .. n_iters - 1``."""
    q = np.asarray(q0, dtype=float).copy()
    if constants is None:
        constants = smoothness_constants(mdp, b, q)
    init_err = float(np.max(np.abs(q - q_star)))
    errors, bounds, hist = [], [], []
    for k in range(n_iters):
        q = car_apply(q, mdp, b)
        errors.append(float(np.max(np.abs(q - q_star))))
        bounds.append(constants.bound(k, init_err))
        if keep_history:
            hist.append(q.copy())
    return FixedPointTrace(np.arange(n_iters), np.array(errors), np.array(bounds), q, constants, hist)


# --- norms --------------------------------------------------------------------

def lp_norm(f, p, cell_measure: float = 1.0) -> float:
    """Grid L^p norm: ``(sum |f|^p * cell_measure)^(1/p)``, or ``max |f|``."""
    p = _as_p(p)
    f = np.abs(np.asarray(f, dtype=float)).ravel()
    if f.size == 0:
        return 0.0
    top = float(f.max())
    if math.isinf(p):
        return top
    if top == 0.0:
        return 0.0
    # scale by the max to keep large exponents finite
    return top * float(np.sum((f / top) ** p) * cell_measure) ** (1.0 / p)


def _density(d) -> np.ndarray:
    return d.d if isinstance(d, Visitation) else np.asarray(d, dtype=float)


def seminorm(f, p, d, cell_measure: float = 1.0) -> float:
    dens = _density(d)
    f = np.asarray(f, dtype=float)
    if dens.shape != f.shape:
        raise ValueError("visitation density must align with f")
    return lp_norm(dens * f, p, cell_measure)


@dataclass(frozen=True)
class NormSpec:
    """``kind`` is ``"lp"`` or ``"seminorm"`` (the latter needs ``d``)."""

    kind: str
    p: float
    d: Optional[object] = None
    cell_measure: float = 1.0

    def __call__(self, f) -> float:
        if self.kind == "lp":
            return lp_norm(f, self.p, self.cell_measure)
        if self.kind == "seminorm":
            if self.d is None:
                raise ValueError("seminorm spec needs a visitation density")
            return seminorm(f, self.p, self.d, self.cell_measure)
        raise ValueError(f"unknown norm kind {self.kind!r}")


def bellman_residual(q, mdp: TabularMdp) -> np.ndarray:
    return bellman_apply(q, mdp) - np.asarray(q, dtype=float)


def bellman_error(q, mdp: TabularMdp, norm_spec: NormSpec) -> float:
    return norm_spec(bellman_residual(q, mdp))


# --- stability ------------------------------------------------------------------

@dataclass
class StabilityConstants:
    c_p_p: float
    c_d: float = float("nan")
    m_d: float = float("nan")

    def __post_init__(self):
        if self.c_p_p < 0:
            raise ValueError("c_p_p must be non-negative")
        if self.c_d > self.m_d:
            raise ValueError("c_d must not exceed m_d")


def transition_norm_constant(mdp: TabularMdp, p, cell_measure: float = 1.0) -> float:
    """``sup_{s,a} ||P(.|s,a)||_{p/(p-1)}`` with transition densities taken
    relative to ``cell_measure``."""
    p = _as_p(p)
    conj = math.inf if p == 1.0 else (1.0 if math.isinf(p) else p / (p - 1.0))
    dens = abs(mdp.transition.multiply(1.0 / cell_measure).tocsr())
    if math.isinf(conj):
        return float(dens.max())
    top = float(dens.max())
    if top == 0.0:
        return 0.0
    sums = np.asarray((dens / top).power(conj).sum(axis=1)).ravel()
    return top * float(np.max(sums * cell_measure)) ** (1.0 / conj)


def stability_constants(mdp: TabularMdp, p, visitation: Optional[Visitation] = None,
                        cell_measure: float = 1.0) -> StabilityConstants:
    c_pp = transition_norm_constant(mdp, p, cell_measure)
    if visitation is None:
        return StabilityConstants(c_pp)
    d = visitation.d
    return StabilityConstants(c_pp, float(d.min()), float(d.max()))


def stability_conditions_hold(p, q, gamma: float, c_p_p: float, n_actions: int,
                              measure_s: float) -> bool:
    p, q = _as_p(p), _as_p(q)
    if not (gamma * c_p_p < 1.0 and p <= q):
        return False
    if gamma == 0.0 or c_p_p == 0.0:
        return True
    if math.isinf(p):
        return True
    need = (math.log(n_actions) + math.log(measure_s)) / math.log(1.0 / (gamma * c_p_p))
    return p >= max(1.0, need) and gamma * c_p_p * (n_actions * measure_s) ** (1.0 / p) < 1.0


def stability_constant(p, q, gamma: float, c_p_p: float, n_actions: int, measure_s: float) -> float:
    """``(|A| mu(S))^(1/p - 1/q) / (1 - gamma C_{P,p} (|A| mu(S))^(1/p))``;
    ``inf`` when the stable-regime conditions fail."""
    p, q = _as_p(p), _as_p(q)
    if not stability_conditions_hold(p, q, gamma, c_p_p, n_actions, measure_s):
        return math.inf
    vol = n_actions * measure_s
    return vol ** (1.0 / p - 1.0 / q) / (1.0 - gamma * c_p_p * vol ** (1.0 / p))


@dataclass
class StabilityRatio:
    num: float
    den: float
    ratio: float
    exact: bool = False
    infinite: bool = False


def stability_ratio(q, mdp: TabularMdp, q_exp, p_exp, q_star: np.ndarray,
                    norm_space="plain", cell_measure: float = 1.0) -> StabilityRatio:
    """``||Q - Q*||_p / ||T_B Q - Q||_q`` where the denominator is a plain
    L^q norm or, if ``norm_space`` is a visitation, a (q, d)-seminorm."""
    q = np.asarray(q, dtype=float)
    num = lp_norm(q - q_star, p_exp, cell_measure)
    resid = bellman_residual(q, mdp)
    if isinstance(norm_space, str):
        if norm_space != "plain":
            raise ValueError(f"unknown norm space {norm_space!r}")
        den = lp_norm(resid, q_exp, cell_measure)
    else:
        den = seminorm(resid, q_exp, norm_space, cell_measure)
    if den == 0.0:
        if num == 0.0:
            return StabilityRatio(0.0, 0.0, 0.0, exact=True)
        return StabilityRatio(num, 0.0, math.inf, infinite=True)
    return StabilityRatio(num, den, num / den)


# --- k-measurement ----------------------------------------------------------------

@dataclass(frozen=True)
class KlMeasurementConfig:
    k: float
    state_weight: np.ndarray
    cell_measure: float = 1.0
    divergence: str = "KL"

    def __post_init__(self):
        if self.divergence != "KL":
            raise ValueError("only the KL divergence is supported")
        if not float(self.k) >= 1.0:
            raise ValueError("k must be >= 1")
        w = np.asarray(self.state_weight, dtype=float)
        if w.min() < 0 or abs(w.sum() * self.cell_measure - 1.0) > 1e-6:
            raise ValueError("state_weight must integrate to 1")
        object.__setattr__(self, "state_weight", w)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-state ``KL(p(.|s) || q(.|s))`` in nats; ``inf`` on support violations."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def kl_k_measurement(p_policy, q_policy, cfg: KlMeasurementConfig) -> float:
    """``|| mu(s) KL(p(.|s) || q(.|s)) ||_k`` over states. Returns ``inf``
    (never a finite number) when q misses the support of p somewhere."""
    kl = kl_rows(p_policy, q_policy)
    if not np.all(np.isfinite(kl)):
        return math.inf
    return lp_norm(cfg.state_weight * np.clip(kl, 0.0, None), cfg.k, cfg.cell_measure)


def reinforce_targets(q_pi: np.ndarray, pi, d_pi: np.ndarray):
    """Improved policy and state weighting that turn a REINFORCE step into a
    forward-KL 1-measurement problem (requires positive Q)."""
    pi = np.asarray(pi, dtype=float)
    v = (q_pi * pi).sum(axis=1)
    if np.any(q_pi <= 0):
        raise ValueError("the reformulation needs strictly positive Q")
    phi = q_pi * pi / v[:, None]
    mu = d_pi * v / np.sum(d_pi * v)
    return phi, mu


def ppo_targets(advantage: np.ndarray, beta: float, d_pi: np.ndarray):
    """Boltzmann improvement ``exp(beta A) / Z`` and state weighting ``d^pi``
    for the reversed-KL view of an entropy-regularised PPO step."""
    z = beta * np.asarray(advantage, dtype=float)
    z = z - z.max(axis=1, keepdims=True)
    phi = np.exp(z)
    phi /= phi.sum(axis=1, keepdims=True)
    return phi, np.asarray(d_pi, dtype=float)


__all__ = [
    "bellman_apply", "car_apply", "car_apply_setwise", "adversarial_next_values",
    "argmax_is_singleton", "SmoothnessConstants", "smoothness_constants",
    "initial_continuity", "neighborhood_diameter", "FixedPointTrace",
    "car_fixed_point_run", "lp_norm", "seminorm", "NormSpec", "bellman_error",
    "bellman_residual", "StabilityConstants", "stability_constants",
    "transition_norm_constant", "stability_conditions_hold", "stability_constant",
    "StabilityRatio", "stability_ratio", "KlMeasurementConfig", "kl_rows",
    "kl_k_measurement", "reinforce_targets", "ppo_targets", "policy_table",
]
