"""Continuum constructions realised on uniform 1-D grids.

Every construction here is piecewise linear in the state, so the exact
measures and L^p norms have closed forms; the grid scans serve as the
numerical cross-check and the closed forms as the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .mdp_core import TIE_TOL, TabularMdp, perturbation_set, value_iteration
from .operators import car_apply, lp_norm

_ALIGN_TOL = 1e-9


# --- grids ------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid1D:
    """``n`` evenly spaced points on ``[lo, hi]``; each point carries measure
    ``(hi - lo) / n`` so counts convert directly to Lebesgue measure."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 3 or self.n % 2 == 0:
            raise ValueError("grid needs an odd number of points >= 3")
        if not self.hi > self.lo:
            raise ValueError("grid needs hi > lo")

    @classmethod
    def from_spacing(cls, lo: float, hi: float, spacing: float) -> "Grid1D":
        cells = (hi - lo) / spacing
        if abs(cells - round(cells)) > _ALIGN_TOL * max(1.0, cells):
            raise ValueError(f"spacing {spacing} does not divide [{lo}, {hi}]")
        return cls(lo, hi, int(round(cells)) + 1)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def cell_measure(self) -> float:
        return (self.hi - self.lo) / self.n

    @property
    def total_measure(self) -> float:
        return self.hi - self.lo

    @property
    def points(self) -> np.ndarray:
        # integer offsets about the midpoint keep symmetric grids exactly symmetric
        mid = 0.5 * (self.lo + self.hi)
        return mid + (np.arange(self.n) - (self.n - 1) / 2) * self.spacing

    def steps(self, length: float) -> int:
        """``length`` in grid steps; raises if it is not a whole number."""
        k = length / self.spacing
        if abs(k - round(k)) > _ALIGN_TOL * max(1.0, abs(k)):
            raise ValueError(f"length {length} is not a multiple of the spacing {self.spacing}")
        return int(round(k))

    def window(self, eps: float) -> int:
        """Number of grid steps inside a closed radius ``eps``."""
        return int(math.floor(eps / self.spacing + _ALIGN_TOL))

    def index_of(self, s: float) -> int:
        return int(round((s - self.lo) / self.spacing))


def window_dilate(mask: np.ndarray, half_width: int) -> np.ndarray:
    """``out[i] = any(mask[i-w : i+w+1])`` via a running count."""
    mask = np.asarray(mask, dtype=bool)
    if half_width <= 0:
        return mask.copy()
    c = np.concatenate([[0], np.cumsum(mask, dtype=np.int64)])
    n = mask.size
    idx = np.arange(n)
    hi = np.minimum(idx + half_width + 1, n)
    lo = np.maximum(idx - half_width, 0)
    return (c[hi] - c[lo]) > 0


def _runs(mask: np.ndarray) -> int:
    """Number of maximal runs of True."""
    m = np.asarray(mask, dtype=np.int8)
    return int(np.count_nonzero(np.diff(np.concatenate([[0], m])) == 1))


# --- measure reports ---------------------------------------------------------------

@dataclass
class MeasureReport:
    m_sub: float
    m_adv: float
    m_total: float
    epsilon: float
    tag: str
    m_nu: float = 0.0
    h_delta: float = float("nan")
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        slack = 1e-12 * max(1.0, self.m_total)
        if not (-slack <= self.m_sub <= self.m_adv + slack and self.m_adv <= self.m_total + slack):
            raise ValueError("measure report violates 0 <= m_sub <= m_adv <= m_total")

    def checks(self) -> dict:
        """``name -> (lhs, rhs, holds)`` for every recorded bound."""
        out = {}
        for name, (key, rhs) in self.bounds.items():
            lhs = getattr(self, key)
            out[name] = (lhs, rhs, bool(lhs <= rhs + 1e-12))
        return out


def suboptimal_mask(scores: np.ndarray, q_star: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """``bad[s, a]``: action ``a`` is strictly suboptimal at ``s`` under Q*."""
    q_star = np.asarray(q_star, dtype=float)
    return q_star < q_star.max(axis=1, keepdims=True) - tol


def adversarial_states(greedy: np.ndarray, bad: np.ndarray, half_width: int) -> np.ndarray:
    """States with a grid point within ``half_width`` steps whose greedy
    action is suboptimal at the state itself."""
    adv = np.zeros(bad.shape[0], dtype=bool)
    for a in range(bad.shape[1]):
        adv |= bad[:, a] & window_dilate(greedy == a, half_width)
    return adv


def measure_sets(q_or_policy, q_star, eps: float, grid: Grid1D, tag: str = "scan",
                 tol: float = TIE_TOL) -> MeasureReport:
    """Scan ``S_sub`` and ``S_adv`` on the grid. ``q_or_policy`` is any
    ``(n, |A|)`` score table whose argmax is the acting rule (Q values or
    action probabilities); ``q_star`` plays the role of Q*."""
    scores = np.asarray(q_or_policy, dtype=float)
    q_star = np.asarray(q_star, dtype=float)
    if scores.shape != q_star.shape or scores.shape[0] != grid.n:
        raise ValueError("inputs must share the grid")
    greedy = np.argmax(scores, axis=1)
    bad = suboptimal_mask(scores, q_star, tol)
    sub = bad[np.arange(grid.n), greedy]
    adv = adversarial_states(greedy, bad, grid.window(eps))
    ties = (q_star >= q_star.max(axis=1, keepdims=True) - tol).sum(axis=1) > 1
    cm = grid.cell_measure
    return MeasureReport(
        m_sub=float(sub.sum() * cm), m_adv=float(adv.sum() * cm),
        m_total=grid.total_measure, epsilon=eps, tag=tag, m_nu=float(ties.sum() * cm),
    )


# --- drift MDPs ------------------------------------------------------------------

@dataclass(frozen=True)
class DriftMdpParams:
    """Two-action drift on ``[-1, 1]``.

    ``variant="clamp"``: ``a1`` moves left, ``a2`` right, clamped at the ends;
    ``r(s, a1) = -k1 s`` and ``r(s, a2) = k2 s``.
    ``variant="stay"``: same moves, but a move that would leave the interval
    keeps the state in place; ``r(s, a_i) = k_i s``.
    ``kernel_width > 0`` replaces the deterministic move by a triangular
    kernel of that half-width around the clamped target (clamp only).
    """

    k1: float = 1.0
    k2: float = 1.0
    step: float = 0.1
    gamma: float = 0.9
    variant: str = "clamp"
    kernel_width: float = 0.0

    def __post_init__(self):
        if not (self.k2 >= self.k1 > 0):
            raise ValueError("need k2 >= k1 > 0")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.variant not in ("clamp", "stay"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.kernel_width < 0 or (self.kernel_width > 0 and self.variant != "clamp"):
            raise ValueError("kernel smoothing is only defined for the clamp variant")


def _drift_targets(params: DriftMdpParams, grid: Grid1D) -> np.ndarray:
    k = grid.steps(params.step)
    idx = np.arange(grid.n)
    if params.variant == "clamp":
        left = np.maximum(idx - k, 0)
        right = np.minimum(idx + k, grid.n - 1)
    else:
        left = np.where(idx - k >= 0, idx - k, idx)
        right = np.where(idx + k <= grid.n - 1, idx + k, idx)
    return np.stack([left, right], axis=1)


def _kernel_rows(targets: np.ndarray, grid: Grid1D, width: float) -> sp.csr_matrix:
    w = grid.window(width)
    if w < 1:
        raise ValueError("kernel width must cover at least one grid step")
    offsets = np.arange(-w, w + 1)
    cols = targets[:, None] + offsets[None, :]
    weight = np.broadcast_to(1.0 - np.abs(offsets) / (w + 1.0), cols.shape).copy()
    weight[(cols < 0) | (cols >= grid.n)] = 0.0
    cols = np.clip(cols, 0, grid.n - 1)
    weight /= weight.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(targets.size), offsets.size)
    mat = sp.csr_matrix((weight.ravel(), (rows, cols.ravel())), shape=(targets.size, grid.n))
    mat.sum_duplicates()
    return mat


def drift_mdp(params: DriftMdpParams, grid: Grid1D) -> TabularMdp:
    s = grid.points
    targets = _drift_targets(params, grid)
    if params.variant == "clamp":
        reward = np.stack([-params.k1 * s, params.k2 * s], axis=1)
    else:
        reward = np.stack([params.k1 * s, params.k2 * s], axis=1)
    flat = targets.ravel()
    if params.kernel_width > 0:
        trans = _kernel_rows(flat, grid, params.kernel_width)
    else:
        trans = sp.csr_matrix((np.ones(flat.size), (np.arange(flat.size), flat)),
                              shape=(flat.size, grid.n))
    mu0 = np.full(grid.n, 1.0 / grid.n)
    mu0[-1] = 1.0 - mu0[:-1].sum()
    return TabularMdp(trans, reward, params.gamma, mu0, s[:, None])


# --- non-contraction witness -------------------------------------------------------

def _witness_q(s: np.ndarray, n: float, lo_val: float, hi_val: float, low_mid: float,
               right_val: float, eps: float) -> np.ndarray:
    """Piecewise-linear profile: ``lo_val`` on s < 0, linear down to
    ``low_mid`` on [0, eps/8), flat on [eps/8, 3eps/8), linear up towards
    ``right_val`` on [3eps/8, eps/2), then ``right_val``."""
    e8 = eps / 8.0
    out = np.empty_like(s)
    out[s < 0] = lo_val
    m = (s >= 0) & (s < e8)
    out[m] = lo_val - (lo_val - low_mid) / e8 * s[m]
    m = (s >= e8) & (s < 3 * e8)
    out[m] = low_mid
    m = (s >= 3 * e8) & (s < 4 * e8)
    out[m] = low_mid + (right_val - low_mid) / e8 * (s[m] - 3 * e8)
    out[s >= 4 * e8] = right_val
    return out


@dataclass
class NonContractionWitness:
    q1: np.ndarray
    q2: np.ndarray
    probe_state: int
    probe_coord: float
    sup_gap: float
    operator_gap: float
    grid: Grid1D
    mdp: TabularMdp

    @property
    def ratio(self) -> float:
        return self.operator_gap / self.sup_gap


def non_contraction_witness(n: float = 20.0, delta: float = 1.0, eps: float = 0.08,
                            gamma: float = 0.9, grid: Optional[Grid1D] = None,
                            probe: Optional[float] = None) -> NonContractionWitness:
    """Two Q tables at sup distance ``delta`` whose CAR backups differ by
    ``gamma * n`` at every (s, a), with all mass sent to ``probe``.

    The default probe is ``-3 eps / 4``; at ``-eps / 2`` the closed ball
    reaches ``eps / 2`` where both tables prefer a2 and the gap vanishes."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not n > max(delta / gamma, 2 * delta):
        raise ValueError(f"n must exceed max(delta/gamma, 2 delta) = {max(delta / gamma, 2 * delta)}")
    if not 0 < eps <= 0.5:
        raise ValueError("eps must lie in (0, 0.5]")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    grid = grid or Grid1D(-1.0, 1.0, 2001)
    probe = -0.75 * eps if probe is None else probe
    for length in (eps / 8.0, abs(probe)):
        grid.steps(length)
    s = grid.points
    q1 = np.stack([_witness_q(s, n, 2 * n, 0, 2 * delta, n, eps),
                   _witness_q(s, n, n, 0, delta, 2 * n, eps)], axis=1)
    q2 = np.stack([_witness_q(s, n, 2 * n, 0, delta, n, eps),
                   _witness_q(s, n, n, 0, 2 * delta, 2 * n, eps)], axis=1)
    j = grid.index_of(probe)
    trans = sp.csr_matrix((np.ones(2 * grid.n), (np.arange(2 * grid.n), np.full(2 * grid.n, j))),
                          shape=(2 * grid.n, grid.n))
    mu0 = np.zeros(grid.n)
    mu0[j] = 1.0
    mdp = TabularMdp(trans, np.zeros((grid.n, 2)), gamma, mu0, s[:, None])
    b = perturbation_set(s, eps)
    gap = np.abs(car_apply(q1, mdp, b) - car_apply(q2, mdp, b))
    return NonContractionWitness(q1, q2, j, float(s[j]), float(np.max(np.abs(q1 - q2))),
                                 float(gap.max()), grid, mdp)


# --- L^p comb Q --------------------------------------------------------------------

def comb_teeth(p: float, delta: float, eps: float, gamma: float) -> int:
    """Smallest integer n > max(1/eps, (1/(1-gamma))^p, delta^p, delta^(p-1))."""
    need = max(1.0 / eps, (1.0 / (1.0 - gamma)) ** p, delta ** p, delta ** (p - 1))
    return int(math.floor(need)) + 1


def comb_grid(p: float, delta: float, eps: float, gamma: float, step: float = 0.1,
              min_points: int = 100) -> Grid1D:
    """Grid on [-1, 1] with spacing ``1 / (n^2 M)`` so that comb teeth, the
    tooth pitch and the drift step are whole numbers of grid steps."""
    n = comb_teeth(p, delta, eps, gamma)
    width = delta ** p
    base = max(1, int(round(1.0 / step)))
    m = base * int(math.ceil(min_points / (base * width)))
    return Grid1D.from_spacing(-1.0, 1.0, 1.0 / (n * n * m))


@dataclass
class CombQ:
    q: np.ndarray
    n: int
    width: float
    depth: float
    teeth_mask: np.ndarray  # (n_states, 2): depressed entries

    def analytic_lp_error(self, p: float) -> float:
        """Per-action ``||Q - Q*||_p`` of the continuum construction."""
        return (self.n * self.width * self.depth ** p) ** (1.0 / p)

    @property
    def analytic_sub_measure(self) -> float:
        return 2 * self.n * self.width


def lp_necessity_comb_q(q_star: np.ndarray, p: float, delta: float, eps: float, grid: Grid1D,
                        gamma: float = 0.9) -> CombQ:
    """Depress ``a2`` by ``n^(1/p)`` on ``[k/n, k/n + delta^p/n^2]`` and
    ``a1`` on the mirrored intervals ``[-(k+1)/n, -(k+1)/n + delta^p/n^2]``."""
    if not 1 <= p < math.inf:
        raise ValueError("comb construction needs finite p >= 1")
    n = comb_teeth(p, delta, eps, gamma)
    width = delta ** p / n ** 2
    depth = n ** (1.0 / p)
    s = grid.points
    slack = _ALIGN_TOL * grid.spacing
    mask = np.zeros((grid.n, 2), dtype=bool)
    for k in range(n):
        left = k / n
        mask[:, 1] |= (s >= left - slack) & (s <= left + width + slack)
        left = -(k + 1) / n
        mask[:, 0] |= (s >= left - slack) & (s <= left + width + slack)
    q = np.asarray(q_star, dtype=float).copy()
    q[mask] -= depth
    return CombQ(q, n, width, depth, mask)


def comb_adv_measure_analytic(comb: CombQ, eps: float) -> float:
    """Lebesgue measure of the union of the eps-dilated teeth inside [-1, 1]."""
    ivs = sorted([(k / comb.n - eps, k / comb.n + comb.width + eps) for k in range(comb.n)]
                 + [(-(k + 1) / comb.n - eps, -(k + 1) / comb.n + comb.width + eps)
                    for k in range(comb.n)])
    total, cur_lo, cur_hi = 0.0, None, None
    for lo, hi in ivs:
        lo, hi = max(lo, -1.0), min(hi, 1.0)
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    return total + (cur_hi - cur_lo)


# --- L^inf closeness -----------------------------------------------------------------

def linf_worst_q(q_star: np.ndarray, delta: float) -> np.ndarray:
    """Shift the optimal action down and the other up by ``delta``."""
    q_star = np.asarray(q_star, dtype=float)
    best = np.argmax(q_star, axis=1)
    q = q_star + delta
    q[np.arange(q.shape[0]), best] -= 2 * delta
    return q


def linf_closeness_report(q_star: np.ndarray, delta: float, eps: float, k_slope: float,
                          grid: Grid1D) -> MeasureReport:
    if not 0 <= delta <= k_slope:
        raise ValueError("need 0 <= delta <= k_slope")
    q = linf_worst_q(q_star, delta)
    rep = measure_sets(q, q_star, eps, grid, tag="linf_closeness")
    # one grid cell of slack for the closed endpoints of each interval
    cell = grid.cell_measure
    rep.bounds = {
        "sub": ("m_sub", 2 * delta / k_slope + cell),
        "adv": ("m_adv", 2 * eps + 2 * delta / k_slope + 2 * cell),
    }
    return rep


# --- instability hat -------------------------------------------------------------------

def hat_width(h: float, q_exp: float, p_exp: float, n_target: float, delta: float) -> float:
    """``min((delta / 3h)^q, (3 n 2^(1/p))^(-pq/(p-q)))`` with the p = inf limit."""
    if not q_exp < p_exp:
        raise ValueError("the hat construction needs q < p")
    if math.isinf(p_exp):
        second = (3.0 * n_target) ** (-q_exp)
    else:
        second = (3.0 * n_target * 2 ** (1.0 / p_exp)) ** (-p_exp * q_exp / (p_exp - q_exp))
    first = math.inf if h == 0 else (delta / (3.0 * h)) ** q_exp
    return min(first, second)


def hat_profile(s: np.ndarray, h: float, width: float) -> np.ndarray:
    """Trapezoid of height ``h`` on ``(0, width)`` with ramps of ``width / 4``."""
    out = np.zeros_like(s, dtype=float)
    up = (s > 0) & (s <= width / 4)
    flat = (s > width / 4) & (s < 3 * width / 4)
    down = (s >= 3 * width / 4) & (s < width)
    out[up] = 4 * h / width * s[up]
    out[flat] = h
    out[down] = -4 * h / width * s[down] + 4 * h
    return out


@dataclass
class HatQ:
    q: np.ndarray
    width: float
    h: float

    def analytic_error_norm(self, p: float) -> float:
        """``||Q - Q*||_p`` of the continuum trapezoid."""
        if math.isinf(p):
            return self.h
        return self.h * (self.width / 2 + self.width / (2 * (p + 1))) ** (1.0 / p)

    def analytic_residual_norm(self, q: float, gamma: float) -> float:
        """``||T_B Q - Q||_q``: the trapezoid once at weight 1 and twice at
        weight gamma (the two predecessor strips)."""
        if math.isinf(q):
            return self.h
        shape = (self.width / 2 + self.width / (2 * (q + 1))) ** (1.0 / q)
        return self.h * shape * (1 + 2 * gamma ** q) ** (1.0 / q)


def instability_hat_q(q_star: np.ndarray, h: float, q_exp: float, p_exp: float, n_target: float,
                      delta: float, grid: Grid1D, min_points: int = 8) -> HatQ:
    width = hat_width(h, q_exp, p_exp, n_target, delta)
    need = width / min_points
    if grid.spacing > need:
        raise ValueError(f"hat width {width:.3g} needs grid spacing <= {need:.3g} "
                         f"(got {grid.spacing:.3g})")
    q = np.asarray(q_star, dtype=float).copy()
    q[:, 1] += hat_profile(grid.points, h, width)
    return HatQ(q, width, h)


# --- comb policy ------------------------------------------------------------------------

def comb_t_objective(t):
    t = np.asarray(t, dtype=float)
    return np.log(1.0 / (1.0 - t)) + t / math.e + 2 * t * np.log((1.0 - t) / t)


def comb_t(delta: float, upper: float = 0.5, tol: float = 1e-10) -> float:
    """Bisection keeping ``f(lo) <= delta/2 < f(hi)``; returns ``lo``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    target = delta / 2
    lo, hi = 0.0, upper
    if comb_t_objective(hi * (1 - 1e-12)) <= target:
        return hi * (1 - 1e-12)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if comb_t_objective(mid) <= target:
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise ValueError("no admissible t found")
    return lo


@dataclass(frozen=True)
class CombLayout:
    t: float
    n: int
    l: float
    centers: tuple  # dip centres on the positive half; mirrored on the negative half

    @property
    def dip_measure(self) -> float:
        return 2 * len(self.centers) * self.l


def comb_layout(delta: float, eps: float, k_exp: float = 1.0, phi_min: float = 0.5,
                spacing: Optional[float] = None) -> CombLayout:
    """Dip count and width for the comb policy on [-1/2, 1/2].

    Regular dips sit at ``[2 i eps, 2 i eps + l]``; when the last one leaves
    more than ``eps`` of uncovered edge, an extra dip at ``[1/2 - l, 1/2]`` is
    added. Widths are sized for ``n + 2`` dips per side so the extra dip
    never breaks the divergence budget."""
    t = comb_t(delta, upper=min(0.5, phi_min))
    log_r = math.log((1 - t) / t)
    n = int(math.floor(1.0 / (4 * eps)))
    for _ in range(10):
        l = min(delta ** k_exp / (2 * (n + 2) ** 2 * (12 + 4 * log_r) ** k_exp), eps)
        if spacing is not None:
            l = 2 * spacing * math.floor(l / (2 * spacing) + _ALIGN_TOL)
            if l <= 0:
                raise ValueError("grid too coarse for the comb dips")
        n_new = int(math.floor((1 - 2 * l) / (4 * eps)))
        if n_new == n:
            break
        n = n_new
    centers = [2 * i * eps + l / 2 for i in range(n + 1)]
    if 0.5 - centers[-1] > eps:
        centers.append(0.5 - l / 2)
    return CombLayout(t, n, l, tuple(centers))


def comb_policy_grid(delta: float, eps: float, k_exp: float = 1.0, phi_min: float = 0.5,
                     min_points: int = 20) -> Grid1D:
    """Grid on [-1/2, 1/2] whose spacing divides ``2 eps`` and resolves each
    dip with at least ``min_points`` points."""
    base = comb_layout(delta, eps, k_exp, phi_min)
    per_unit = 1.0 / (2 * eps)
    k = int(round(per_unit))
    if abs(k - per_unit) > _ALIGN_TOL * per_unit:
        raise ValueError("2 eps must divide 1")
    cells = k * int(math.ceil(min_points / (base.l * k)))
    return Grid1D(-0.5, 0.5, cells + 1)


@dataclass
class CombPolicy:
    pi: np.ndarray
    phi: np.ndarray
    layout: CombLayout
    dip_mask: np.ndarray

    @property
    def t(self) -> float:
        return self.layout.t


def comb_vulnerable_policy(phi: np.ndarray, k_exp: float, delta: float, eps: float,
                           grid: Grid1D) -> CombPolicy:
    """Policy equal to ``phi`` clipped to ``[t, 1-t]`` except on narrow dips
    where the optimal action's probability falls linearly to ``t`` and back."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (grid.n, 2):
        raise ValueError("phi must be an (n, 2) table on the grid")
    if abs(grid.lo + 0.5) > _ALIGN_TOL or abs(grid.hi - 0.5) > _ALIGN_TOL:
        raise ValueError("comb policy lives on [-1/2, 1/2]")
    if phi.min() <= 0:
        raise ValueError("phi must be strictly stochastic")
    s = grid.points
    opt = np.where(s >= 0, 0, 1)
    if np.any(np.argmax(phi, axis=1) != opt):
        raise ValueError("phi must agree with the optimal action (a1 on s >= 0)")
    lay = comb_layout(delta, eps, k_exp, float(phi.min()), grid.spacing)
    t, l = lay.t, lay.l
    tilde = np.clip(phi, t, 1 - t)
    tilde /= tilde.sum(axis=1, keepdims=True)
    pi = tilde.copy()
    dip = np.zeros(grid.n, dtype=bool)
    slack = _ALIGN_TOL * grid.spacing
    for c in lay.centers:
        for sign, act in ((1.0, 0), (-1.0, 1)):
            a, b = sign * c - l / 2, sign * c + l / 2
            # a dip never crosses s = 0, where the optimal action switches
            side = s >= 0 if sign > 0 else s < 0
            m = (s >= a - slack) & (s <= b + slack) & side
            ia, ib = grid.index_of(a), grid.index_of(b)
            ia += int(not side[ia])
            ib -= int(not side[ib])
            va, vb = tilde[ia, act], tilde[ib, act]
            x = s[m]
            left = x <= sign * c
            val = np.where(left, va + (t - va) * (x - a) / (l / 2), t + (vb - t) * (x - sign * c) / (l / 2))
            pi[m, act] = val
            pi[m, 1 - act] = 1.0 - val
            dip |= m
    return CombPolicy(pi, phi, lay, dip)


def comb_dip_kl_quadrature(comb: CombPolicy, phi_pos: np.ndarray, phi_neg: np.ndarray,
                           k_exp: float = 1.0, nodes: int = 64) -> float:
    """``(sum over dips of int KL(phi || pi)^k ds)^(1/k)`` by Gauss-Legendre on
    each linear half-dip; ``phi`` is constant on each side of 0 with rows
    ``phi_pos`` and ``phi_neg``."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    u = 0.5 * (x + 1)
    t, l = comb.layout.t, comb.layout.l
    total = 0.0
    for act, row in ((0, np.asarray(phi_pos, float)), (1, np.asarray(phi_neg, float))):
        start = min(max(row[act], t), 1 - t)
        for v0, v1 in ((start, t), (t, start)):
            p_act = v0 + (v1 - v0) * u
            pi = np.empty((u.size, 2))
            pi[:, act] = p_act
            pi[:, 1 - act] = 1 - p_act
            kl = np.sum(row * (np.log(row) - np.log(pi)), axis=1)
            total += len(comb.layout.centers) * 0.5 * np.sum(w * kl ** k_exp) * (l / 2)
    return total ** (1.0 / k_exp)


def policy_measure_sets(pi: np.ndarray, grid: Grid1D, eps: float, pi_star: Optional[np.ndarray] = None,
                        tag: str = "policy") -> MeasureReport:
    """``S_sub`` / ``S_adv`` of a policy against the sign-split optimal
    policy (a1 on s >= 0) unless ``pi_star`` is supplied."""
    if pi_star is None:
        pi_star = np.zeros((grid.n, 2))
        pi_star[np.arange(grid.n), np.where(grid.points >= 0, 0, 1)] = 1.0
    return measure_sets(pi, pi_star, eps, grid, tag=tag)


# --- infinity-measurement guarantee -------------------------------------------------------

def margin_policy(grid: Grid1D, ramp: float, amplitude: float = 0.45) -> np.ndarray:
    """``phi(a1|s) = 1/2 + amplitude * clip(s / ramp, -1, 1)``."""
    p1 = 0.5 + amplitude * np.clip(grid.points / ramp, -1.0, 1.0)
    return np.stack([p1, 1 - p1], axis=1)


def kl_budget_attack(phi: np.ndarray, mu: np.ndarray, delta: float, iters: int = 200) -> np.ndarray:
    """Per-state two-action policy with ``mu(s) KL(phi || pi) = delta`` that
    moves probability away from phi's preferred action (bisection)."""
    phi = np.asarray(phi, dtype=float)
    target = delta / np.asarray(mu, dtype=float)
    pref = np.argmax(phi, axis=1)
    p = phi[np.arange(phi.shape[0]), pref]
    lo = np.full_like(p, 1e-15)  # preferred-action probability bracket
    hi = p.copy()

    def kl(x):
        return p * np.log(p / x) + (1 - p) * np.log((1 - p) / (1 - x))

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        over = kl(mid) > target
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
    x = hi  # kl(hi) <= target
    pi = np.empty_like(phi)
    pi[np.arange(phi.shape[0]), pref] = x
    pi[np.arange(phi.shape[0]), 1 - pref] = 1 - x
    return pi


def robustness_guarantee_report(phi: np.ndarray, pi: np.ndarray, mu: np.ndarray, delta: float,
                                eps: float, grid: Grid1D, pi_star: Optional[np.ndarray] = None,
                                tol: float = 1e-12) -> MeasureReport:
    """``S_delta``, ``h(delta)`` and the sub/adv measures of ``pi``."""
    phi = np.asarray(phi, dtype=float)
    pi = np.asarray(pi, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.sum(np.where(phi > 0, phi * (np.log(phi) - np.log(pi)), 0.0), axis=1)
    d_inf = float(np.max(mu * kl))
    if not d_inf <= delta + tol:
        raise ValueError(f"D_inf,KL(phi || pi) = {d_inf:.6g} exceeds delta = {delta}")
    thresh = 2 * np.sqrt(2 * delta / mu)
    n_a = phi.shape[1]
    gaps = np.abs(phi[:, :, None] - phi[:, None, :]) + np.where(np.eye(n_a, dtype=bool), np.inf, 0.0)
    s_delta = np.any(gaps.reshape(phi.shape[0], -1) <= thresh[:, None], axis=1)
    cm = grid.cell_measure
    if pi_star is None:
        pi_star = np.eye(n_a)[np.argmax(phi, axis=1)]
    rep = policy_measure_sets(pi, grid, eps, pi_star, tag="inf_measurement")
    m_sd = float(s_delta.sum() * cm)
    rep.h_delta = float(np.sum(mu[s_delta]) * cm)
    dilated = float(window_dilate(s_delta, grid.window(eps)).sum() * cm)
    comps = _runs(s_delta)
    rep.bounds = {
        "sub": ("m_sub", m_sd),
        "adv_dilation": ("m_adv", dilated),
        "adv": ("m_adv", 2 * eps * max(comps, 1) + m_sd + 2 * cm * max(comps, 1)),
    }
    return rep


# --- small stable instance ---------------------------------------------------------------

def random_tabular_mdp(n_states: int = 3, n_actions: int = 2, gamma: float = 0.9,
                       seed: int = 0) -> TabularMdp:
    rng = np.random.default_rng(seed)
    p = rng.random((n_states, n_actions, n_states)) + 0.05
    p /= p.sum(axis=2, keepdims=True)
    return TabularMdp(p, rng.uniform(-1, 1, (n_states, n_actions)), gamma,
                      np.full(n_states, 1.0 / n_states))


def solve_drift(params: DriftMdpParams, grid: Grid1D, tol: float = 1e-10):
    mdp = drift_mdp(params, grid)
    return mdp, value_iteration(mdp, tol)


__all__ = [
    "Grid1D", "window_dilate", "MeasureReport", "suboptimal_mask", "adversarial_states",
    "measure_sets", "DriftMdpParams", "drift_mdp", "solve_drift", "NonContractionWitness",
    "non_contraction_witness", "comb_teeth", "comb_grid", "CombQ", "lp_necessity_comb_q",
    "comb_adv_measure_analytic", "linf_worst_q", "linf_closeness_report", "hat_width",
    "hat_profile", "HatQ", "instability_hat_q", "comb_t_objective", "comb_t", "CombLayout",
    "comb_layout", "comb_policy_grid", "CombPolicy", "comb_vulnerable_policy",
    "comb_dip_kl_quadrature", "policy_measure_sets", "margin_policy", "kl_budget_attack",
    "robustness_guarantee_report", "random_tabular_mdp", "lp_norm",
]
