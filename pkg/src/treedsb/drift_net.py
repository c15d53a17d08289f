"""Drift network with hand-written backpropagation, Adam, and the mean-matching loss.

Layout for data dimension ``d`` and ``h = max(256, 2d)``::

    x  -> block 1a: Linear(d, 128) - act - Linear(128, h)  --+
                                                             concat -> block 2
    t -> pos_encode (32) -> block 1b: Linear(32, 128) - act - Linear(128, h) --+

    block 2: Linear(2h, h) - act - Linear(h, max(128, d)) - act - Linear(max(128, d), d)

The last layer starts at exactly zero, so a fresh network has zero drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFinite, ShapeMismatch, StepOutOfRange
from .sde import TimeSchedule

POS_DIM = 32
HIDDEN = 128
MAX_POSITIONS = 10000.0

# (block, input->output widths) filled in by layer_shapes()
BLOCKS = ("1a", "1b", "2")


def layer_shapes(dim: int) -> dict[str, list[tuple[int, int]]]:
    h = max(256, 2 * dim)
    return {
        "1a": [(dim, HIDDEN), (HIDDEN, h)],
        "1b": [(POS_DIM, HIDDEN), (HIDDEN, h)],
        "2": [(2 * h, h), (h, max(128, dim)), (max(128, dim), dim)],
    }


def pos_encode(t, dim: int = POS_DIM) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_k), cos(t w_k)]`` with ``w_k = 10000^(-k/(dim/2 - 1))``.

    Accepts a scalar (returns shape ``(dim,)``) or an array of times
    (returns ``(len(t), dim)``).
    """
    t_arr = np.asarray(t, dtype=float)
    half = dim // 2
    freqs = np.exp(-np.log(MAX_POSITIONS) * np.arange(half) / (half - 1))
    args = t_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# activations: (forward, derivative given pre-activation)
def _silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _leaky(z):
    return np.where(z > 0, z, 0.01 * z)


def _leaky_grad(z):
    return np.where(z > 0, 1.0, 0.01).astype(z.dtype)


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (_silu, _silu_grad),
    "leaky_relu": (_leaky, _leaky_grad),
    "tanh": (np.tanh, _tanh_grad),
}


@dataclass
class DriftNetParams:
    dim: int
    weights: dict[str, np.ndarray]
    activation: str = "silu"

    @property
    def dtype(self):
        return self.weights["2.W2"].dtype

    def names(self) -> list[str]:
        return list(self.weights)

    def copy(self) -> "DriftNetParams":
        return DriftNetParams(self.dim, {k: v.copy() for k, v in self.weights.items()}, self.activation)

    def astype(self, dtype) -> "DriftNetParams":
        return DriftNetParams(self.dim, {k: v.astype(dtype) for k, v in self.weights.items()}, self.activation)

    def n_params(self) -> int:
        return sum(v.size for v in self.weights.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.weights.values()])

    def is_zero_output(self) -> bool:
        return not np.any(self.weights["2.W2"]) and not np.any(self.weights["2.b2"])


def init_params(dim: int, seed: int = 0, activation: str = "silu", dtype=np.float64) -> DriftNetParams:
    """Uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; zero final layer."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; expected one of {sorted(ACTIVATIONS)}")
    rng = np.random.default_rng(seed)
    weights = {}
    shapes = layer_shapes(dim)
    for block in BLOCKS:
        for i, (fan_in, fan_out) in enumerate(shapes[block]):
            last = block == "2" and i == len(shapes[block]) - 1
            bound = 1.0 / np.sqrt(fan_in)
            if last:
                W = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                W = rng.uniform(-bound, bound, (fan_in, fan_out))
                b = rng.uniform(-bound, bound, fan_out)
            weights[f"{block}.W{i}"] = W.astype(dtype)
            weights[f"{block}.b{i}"] = b.astype(dtype)
    return DriftNetParams(dim, weights, activation)


def _mlp_forward(p, block, n_layers, h, act, cache):
    for i in range(n_layers):
        z = h @ p.weights[f"{block}.W{i}"] + p.weights[f"{block}.b{i}"]
        cache.append((block, i, h, z))
        h = act(z) if i < n_layers - 1 else z
    return h


def _forward(p: DriftNetParams, t, x):
    act, _ = ACTIVATIONS[p.activation]
    dtype = p.dtype
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != p.dim:
        raise ShapeMismatch(f"input has dimension {x.shape[1]}, network expects {p.dim}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    temb = pos_encode(t_arr).astype(dtype)
    cache: list = []
    ha = _mlp_forward(p, "1a", 2, x, act, cache)
    hb = _mlp_forward(p, "1b", 2, temb, act, cache)
    out = _mlp_forward(p, "2", 3, np.concatenate([ha, hb], axis=1), act, cache)
    return out, cache, single


def _forward_shared_time(p: DriftNetParams, t: float, x: np.ndarray) -> np.ndarray:
    # every row shares t: the time branch and its share of block 2's first layer are one row
    act, _ = ACTIVATIONS[p.activation]
    w = p.weights
    h = w["1a.W1"].shape[1]
    temb = pos_encode(float(t))[None, :].astype(p.dtype)
    hb = act(temb @ w["1b.W0"] + w["1b.b0"]) @ w["1b.W1"] + w["1b.b1"]
    bias0 = hb @ w["2.W0"][h:] + w["2.b0"]
    ha = act(x @ w["1a.W0"] + w["1a.b0"]) @ w["1a.W1"] + w["1a.b1"]
    z = act(ha @ w["2.W0"][:h] + bias0)
    z = act(z @ w["2.W1"] + w["2.b1"])
    return z @ w["2.W2"] + w["2.b2"]


def net_forward(p: DriftNetParams, t, x) -> np.ndarray:
    """Drift ``f(t, x)`` for one state ``(d,)`` or a batch ``(B, d)``."""
    if np.ndim(t) == 0 and np.ndim(x) == 2:
        x = np.asarray(x, dtype=p.dtype)
        if x.shape[1] != p.dim:
            raise ShapeMismatch(f"input has dimension {x.shape[1]}, network expects {p.dim}")
        out = _forward_shared_time(p, t, x)
        if not np.all(np.isfinite(out)):
            raise NonFinite("network output is not finite")
        return out
    out, _, single = _forward(p, t, x)
    if not np.all(np.isfinite(out)):
        raise NonFinite("network output is not finite")
    return out[0] if single else out


def _backward(p: DriftNetParams, cache, grad_out) -> dict[str, np.ndarray]:
    _, dact = ACTIVATIONS[p.activation]
    grads: dict[str, np.ndarray] = {}
    h_width = p.weights["1a.W1"].shape[1]

    def back_block(block, n_layers, g, entries):
        for i in reversed(range(n_layers)):
            _, _, h_in, z = entries[i]
            if i < n_layers - 1:
                g = g * dact(z)
            grads[f"{block}.W{i}"] = h_in.T @ g
            grads[f"{block}.b{i}"] = g.sum(axis=0)
            g = g @ p.weights[f"{block}.W{i}"].T
        return g

    g = back_block("2", 3, grad_out, cache[4:7])
    back_block("1a", 2, g[:, :h_width], cache[0:2])
    back_block("1b", 2, g[:, h_width:], cache[2:4])
    return {k: grads[k] for k in p.weights}


def _check_steps(schedule: TimeSchedule, m) -> np.ndarray:
    m_arr = np.asarray(m)
    N = schedule.n_steps
    if np.any(m_arr < 0) or np.any(m_arr > N - 1):
        raise StepOutOfRange(f"step index outside 0..{N - 1}")
    return m_arr.astype(int)


def mean_fn(p: DriftNetParams, schedule: TimeSchedule, m, x) -> np.ndarray:
    """Transition mean ``x + gamma_{m+1} f(t_m, x)`` of step ``m`` (scalar or per row)."""
    m_arr = _check_steps(schedule, m)
    gamma = schedule.steps[m_arr]
    t = schedule.cumulative[m_arr]
    x = np.asarray(x, dtype=float)
    f = net_forward(p, t, x)
    if x.ndim == 2 and gamma.ndim:
        gamma = gamma[:, None]
    return x + gamma * f


def identity_mean(m, x) -> np.ndarray:
    return np.asarray(x, dtype=float)


@dataclass
class MeanMatchBatch:
    """Consecutive states of a forward chain, ``x_next`` one step after ``x_prev``.

    ``step`` holds the forward step index ``k`` of each pair (``X_k, X_{k+1}``);
    the reverse model evaluates them at its own index ``N - k - 1``.
    """

    x_prev: np.ndarray
    x_next: np.ndarray
    step: np.ndarray
    schedule: TimeSchedule = field(repr=False)

    def __post_init__(self):
        self.x_prev = np.atleast_2d(np.asarray(self.x_prev, dtype=float))
        self.x_next = np.atleast_2d(np.asarray(self.x_next, dtype=float))
        b = self.x_prev.shape[0]
        self.step = np.broadcast_to(np.asarray(self.step, dtype=int), (b,)).copy()
        if self.x_next.shape != self.x_prev.shape or b < 1:
            raise ShapeMismatch("x_prev and x_next must share a non-empty (b, d) shape")
        _check_steps(self.schedule, self.step)

    @classmethod
    def from_trajectories(cls, states: np.ndarray, rows: np.ndarray, steps: np.ndarray, schedule):
        return cls(states[rows, steps], states[rows, steps + 1], steps, schedule)

    @property
    def size(self) -> int:
        return self.x_prev.shape[0]


def mean_match_target(prev_mean, batch: MeanMatchBatch) -> np.ndarray:
    """``X_{k+1} + F_k(X_k) - F_k(X_{k+1})`` with ``F`` the co-directed previous mean."""
    k = batch.step
    return batch.x_next + prev_mean(k, batch.x_prev) - prev_mean(k, batch.x_next)


def _reverse_pred(p, batch):
    N = batch.schedule.n_steps
    m = N - batch.step - 1
    gamma = batch.schedule.steps[m][:, None]
    t = batch.schedule.cumulative[m]
    out, cache, _ = _forward(p, t, batch.x_next)
    return batch.x_next + gamma * out, gamma, cache


def mean_match_loss(p_new: DriftNetParams, prev_mean, batch: MeanMatchBatch) -> float:
    """Batch mean of ``||F_new(X_{k+1}) - target||^2``."""
    target = mean_match_target(prev_mean, batch)
    pred, _, _ = _reverse_pred(p_new, batch)
    return float(np.mean(np.sum((pred - target) ** 2, axis=1)))


def backprop_grads(p: DriftNetParams, prev_mean, batch: MeanMatchBatch, target=None):
    """Loss and exact parameter gradients of :func:`mean_match_loss`."""
    if target is None:
        target = mean_match_target(prev_mean, batch)
    pred, gamma, cache = _reverse_pred(p, batch)
    resid = pred - target
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    if not np.isfinite(loss):
        raise NonFinite("mean-matching loss is not finite")
    grad_out = (2.0 / batch.size) * gamma * resid
    grads = _backward(p, cache, grad_out.astype(p.dtype))
    return loss, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, p: DriftNetParams, **hyper) -> "AdamState":
        return cls(
            {k: np.zeros_like(w) for k, w in p.weights.items()},
            {k: np.zeros_like(w) for k, w in p.weights.items()},
            **hyper,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step, self.lr, self.beta1, self.beta2, self.eps,
        )


def adam_step(p: DriftNetParams, grads, state: AdamState, inplace: bool = False):
    """One bias-corrected Adam update; returns ``(params, state)``."""
    if set(grads) != set(p.weights):
        raise ShapeMismatch("gradient names do not match parameter names")
    for k, g in grads.items():
        if g.shape != p.weights[k].shape:
            raise ShapeMismatch(f"gradient {k} has shape {g.shape}, expected {p.weights[k].shape}")
    if not inplace:
        p, state = p.copy(), state.copy()
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.weights[k] -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return p, state
