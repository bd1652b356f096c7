"""Small dense ReLU networks in float64 with hand-written gradients, interval
bound propagation (including its gradient), and Adam."""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

HEADS = ("plain", "dueling", "gaussian")
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2.0 * math.pi)


def dueling_matrix(n_actions: int) -> np.ndarray:
    """Maps ``(V, A_1..A_n)`` to ``Q_a = V + A_a - mean(A)``."""
    m = np.zeros((n_actions + 1, n_actions))
    m[0, :] = 1.0
    m[1:, :] = np.eye(n_actions) - 1.0 / n_actions
    return m


@dataclass
class ForwardCache:
    inputs: list  # input to each affine layer
    pre: list  # pre-activations of hidden layers
    raw: np.ndarray  # last affine output before the head combination
    version: int
    squeeze: bool


@dataclass
class Interval:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if np.any(self.lower > self.upper + 1e-12):
            raise ValueError("interval lower bound exceeds upper bound")

    def contains(self, y: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.all(y >= self.lower - tol) and np.all(y <= self.upper + tol))

    def within(self, other: "Interval", tol: float = 1e-12) -> bool:
        return bool(np.all(self.lower >= other.lower - tol) and np.all(self.upper <= other.upper + tol))


@dataclass
class IbpCache:
    centers: list
    radii: list
    pre_lo: list
    pre_hi: list
    w_last: np.ndarray
    version: int


class MlpNet:
    """Affine-ReLU chain with a ``plain``, ``dueling`` or ``gaussian`` head.

    ``out_dim`` is the number of actions (Q heads) or the action dimension
    (Gaussian head). Parameters are ``[W0, b0, W1, b1, ...]`` with ``W`` of
    shape ``(fan_in, fan_out)``, followed by ``log_std`` for the Gaussian head.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int, head: str = "plain",
                 seed: int = 0, log_std_init: float = 0.0):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.head = head
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        last = out_dim + 1 if head == "dueling" else out_dim
        self.sizes = [int(in_dim), *[int(h) for h in hidden], int(last)]
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = math.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.log_std = np.full(out_dim, float(log_std_init)) if head == "gaussian" else None
        self._mix = dueling_matrix(out_dim) if head == "dueling" else None
        self.version = 0

    # parameters -------------------------------------------------------------

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.log_std is not None:
            out.append(self.log_std)
        return out

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.params(), values):
            if dst.shape != np.shape(src):
                raise ValueError("parameter shape mismatch")
            dst[...] = src
        self.clamp_log_std()
        self.version += 1

    def zero_grads(self) -> List[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def clamp_log_std(self) -> None:
        if self.log_std is not None:
            np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def copy(self) -> "MlpNet":
        return copy.deepcopy(self)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    # forward / backward -------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dimension {self.in_dim}, got shape {np.shape(x)}")
        return x, squeeze

    def forward(self, x, return_cache: bool = False):
        h, squeeze = self._check_input(x)
        inputs, pre = [], []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                pre.append(z)
                h = np.maximum(z, 0.0)
            else:
                h = z
        raw = h
        out = raw @ self._mix if self._mix is not None else raw
        if squeeze:
            out = out[0]
        if return_cache:
            return out, ForwardCache(inputs, pre, raw, self.version, squeeze)
        return out

    __call__ = forward

    def backward(self, cache: ForwardCache, out_grad, log_std_grad=None, need_input_grad: bool = False):
        """Gradients of a scalar loss given ``dL/d(output)``. Returns the
        parameter gradients (and ``dL/dx`` when requested)."""
        if cache.version != self.version:
            raise ValueError("stale forward cache")
        g = np.asarray(out_grad, dtype=float)
        if cache.squeeze:
            g = g[None, :]
        if self._mix is not None:
            g = g @ self._mix.T
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            grads_w[i] = cache.inputs[i].T @ g
            grads_b[i] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ self.weights[i].T
            if i > 0:
                g = g * (cache.pre[i - 1] > 0)
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads += [gw, gb]
        if self.log_std is not None:
            grads.append(np.zeros_like(self.log_std) if log_std_grad is None
                         else np.asarray(log_std_grad, dtype=float).copy())
        if need_input_grad:
            return grads, (g[0] if cache.squeeze else g)
        return grads

    def input_gradient(self, x, out_grad) -> np.ndarray:
        """``d(sum(out_grad * f(x)))/dx``; ``out_grad`` may be a callable of
        the output returning the output gradient."""
        out, cache = self.forward(x, return_cache=True)
        g = out_grad(out) if callable(out_grad) else out_grad
        _, dx = self.backward(cache, g, need_input_grad=True)
        return dx

    # interval bounds ------------------------------------------------------------

    def _last_affine(self):
        w, b = self.weights[-1], self.biases[-1]
        if self._mix is not None:
            return w @ self._mix, b @ self._mix
        return w, b

    def ibp(self, lower, upper, return_cache: bool = False):
        """Interval bounds of the head output over the box ``[lower, upper]``."""
        lo, sq = self._check_input(lower)
        hi, _ = self._check_input(upper)
        c = 0.5 * (lo + hi)
        r = 0.5 * (hi - lo)
        centers, radii, pre_lo, pre_hi = [], [], [], []
        for i in range(self.n_layers):
            if i == self.n_layers - 1:
                w, b = self._last_affine()
            else:
                w, b = self.weights[i], self.biases[i]
            centers.append(c)
            radii.append(r)
            c = c @ w + b
            r = r @ np.abs(w)
            if i < self.n_layers - 1:
                l_pre, h_pre = c - r, c + r
                pre_lo.append(l_pre)
                pre_hi.append(h_pre)
                l_post, h_post = np.maximum(l_pre, 0.0), np.maximum(h_pre, 0.0)
                c = 0.5 * (l_post + h_post)
                r = 0.5 * (h_post - l_post)
        lower_out, upper_out = c - r, c + r
        if sq:
            lower_out, upper_out = lower_out[0], upper_out[0]
        box = Interval(lower_out, upper_out)
        if return_cache:
            w_last, _ = self._last_affine()
            return box, IbpCache(centers, radii, pre_lo, pre_hi, w_last, self.version)
        return box

    def ibp_backward(self, cache: IbpCache, d_lower, d_upper) -> List[np.ndarray]:
        """Parameter gradients of ``sum(d_lower * lower + d_upper * upper)``."""
        if cache.version != self.version:
            raise ValueError("stale IBP cache")
        dl = np.atleast_2d(np.asarray(d_lower, dtype=float))
        du = np.atleast_2d(np.asarray(d_upper, dtype=float))
        dc = dl + du
        dr = du - dl
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            w = cache.w_last if i == self.n_layers - 1 else self.weights[i]
            c_in, r_in = cache.centers[i], cache.radii[i]
            gw = c_in.T @ dc + (r_in.T @ dr) * np.sign(w)
            gb = dc.sum(axis=0)
            if i == self.n_layers - 1 and self._mix is not None:
                gw = gw @ self._mix.T
                gb = gb @ self._mix.T
            grads_w[i], grads_b[i] = gw, gb
            if i == 0:
                break
            dc, dr = dc @ w.T, dr @ np.abs(w).T
            # through ReLU on the (lo, hi) representation
            d_lo = 0.5 * (dc - dr) * (cache.pre_lo[i - 1] > 0)
            d_hi = 0.5 * (dc + dr) * (cache.pre_hi[i - 1] > 0)
            dc, dr = d_lo + d_hi, d_hi - d_lo
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads += [gw, gb]
        if self.log_std is not None:
            grads.append(np.zeros_like(self.log_std))
        return grads

    # gaussian policy head ------------------------------------------------------------

    def gaussian(self, s):
        if self.head != "gaussian":
            raise ValueError("network has no gaussian head")
        mean = self.forward(s)
        return mean, np.exp(self.log_std)


def ibp_bounds(net: MlpNet, x_center, eps: float, domain: Optional[tuple] = None,
               metric: str = "L_inf") -> Interval:
    """Sound output bounds over ``{x : ||x - x_center||_inf <= eps}``,
    optionally intersected with a ``(low, high)`` domain box."""
    if metric != "L_inf":
        raise ValueError("only L_inf boxes are supported")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    lo, hi = input_box(x_center, eps, domain)
    return net.ibp(lo, hi)


def input_box(x_center, eps: float, domain: Optional[tuple] = None):
    x = np.asarray(x_center, dtype=float)
    lo, hi = x - eps, x + eps
    if domain is not None:
        lo = np.maximum(lo, domain[0])
        hi = np.minimum(hi, domain[1])
    return lo, hi


# --- gaussian densities ----------------------------------------------------------------

def gaussian_log_prob(a, mean, log_std):
    """Diagonal Gaussian log density summed over the last axis, with its
    gradients w.r.t. ``mean`` and ``log_std`` (the latter summed over any
    batch axis)."""
    a = np.asarray(a, dtype=float)
    z = (a - mean) * np.exp(-log_std)
    d = np.shape(mean)[-1]
    lp = -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * d * _LOG_2PI
    d_mean = z * np.exp(-log_std)
    d_log_std = z * z - 1.0
    return lp, d_mean, d_log_std


def gaussian_entropy(log_std):
    log_std = np.asarray(log_std, dtype=float)
    ent = float(np.sum(0.5 * (1.0 + _LOG_2PI) + log_std))
    return ent, np.ones_like(log_std)


def gaussian_kl(mean0, mean1, log_std):
    """``KL(N(mean0, s) || N(mean1, s))`` for a shared diagonal scale."""
    var = np.exp(2.0 * np.asarray(log_std))
    return np.sum((np.asarray(mean0) - np.asarray(mean1)) ** 2 / (2.0 * var), axis=-1)


# --- Adam -----------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_net(cls, net: MlpNet, lr: float = 1e-3, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        st.m = [np.zeros_like(p) for p in net.params()]
        st.v = [np.zeros_like(p) for p in net.params()]
        return st


def adam_step(net: MlpNet, grads: Sequence[np.ndarray], state: AdamState) -> MlpNet:
    params = net.params()
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameters")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
    net.clamp_log_std()
    net.version += 1
    return net


def add_grads(a: Sequence[np.ndarray], b: Sequence[np.ndarray], scale: float = 1.0) -> List[np.ndarray]:
    return [x + scale * y for x, y in zip(a, b)]


# --- weight files ---------------------------------------------------------------------

_MAGIC = b"CARNET01"
_HEAD_TAG = {"plain": 0, "dueling": 1, "gaussian": 2}


def save_weights(net: MlpNet, path) -> None:
    """Header (magic, layer count, layer sizes, head tag, out_dim) as
    little-endian uint32, then every parameter as little-endian float64,
    row-major, layer by layer."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", net.n_layers))
        fh.write(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
        fh.write(struct.pack("<II", _HEAD_TAG[net.head], net.out_dim))
        for p in net.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_weights(path) -> MlpNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path} is not a weight file")
    pos = 8
    (n_layers,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    sizes = list(struct.unpack_from(f"<{n_layers + 1}I", blob, pos))
    pos += 4 * (n_layers + 1)
    tag, out_dim = struct.unpack_from("<II", blob, pos)
    pos += 8
    head = {v: k for k, v in _HEAD_TAG.items()}[tag]
    net = MlpNet(sizes[0], sizes[1:-1], out_dim, head)
    values = []
    for p in net.params():
        n = p.size
        values.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(p.shape))
        pos += 8 * n
    if pos != len(blob):
        raise ValueError("weight file has trailing bytes")
    net.set_params(values)
    net.version = 0
    return net
