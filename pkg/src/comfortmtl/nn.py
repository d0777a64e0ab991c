"""Dense layers, activations, dropout, cross-entropy, Adam/SGD and a gradient checker.

Everything works in float64 on either single vectors ``(in,)`` or batches
``(batch, in)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12


class DivergenceError(FloatingPointError):
    """Non-finite loss or gradient; usually a learning rate that is too large."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(message)


@dataclass
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    @classmethod
    def glorot(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "DenseLayer":
        limit = math.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out))

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "DenseLayer":
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out))


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """``W x + b`` for a vector, or row-wise for a batch."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"shape mismatch: layer expects {layer.n_in} inputs, got {x.shape[-1]}")
    return x @ layer.W.T + layer.b


def dense_backward(layer: DenseLayer, x: np.ndarray, grad_out: np.ndarray):
    """Gradients ``(dW, db, dx)`` given the upstream gradient on the output (batched)."""
    dW = grad_out.T @ x
    db = grad_out.sum(axis=0)
    dx = grad_out @ layer.W
    return dW, db, dx


def tanh_apply(v):
    return np.tanh(v)


def tanh_backward(out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (1.0 - out * out)


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_apply(v, rate: float, rng: np.random.Generator | None, training: bool):
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    v = np.asarray(v, dtype=float)
    if not training or rate == 0.0:
        return v
    return v * dropout_mask(v.shape, rate, rng)


def cross_entropy(p, y: int) -> float:
    """``-log p[y]`` with ``p`` floored at 1e-12."""
    p = np.asarray(p, dtype=float)
    if not 0 <= y < p.shape[-1]:
        raise IndexError(f"class index {y} out of range for {p.shape[-1]} classes")
    return float(-math.log(max(p[y], PROB_FLOOR)))


def cross_entropy_batch(P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy; rows with ``y < 0`` give 0."""
    present = y >= 0
    out = np.zeros(len(y))
    rows = np.flatnonzero(present)
    out[rows] = -np.log(np.maximum(P[rows, y[rows]], PROB_FLOOR))
    return out


def softmax_ce_grad(P: np.ndarray, y: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_i scale_i * CE_i`` w.r.t. logits: ``scale_i (p_i - onehot(y_i))``.

    The floor on ``p`` is ignored here, so the gradient is exact whenever
    ``p[y] >= 1e-12``.
    """
    G = P.copy()
    rows = np.flatnonzero(y >= 0)
    G[rows, y[rows]] -= 1.0
    G[y < 0] = 0.0
    return G * scale[:, None]


# ------------------------------------------------------------------- optimizers

@dataclass
class Adam:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Bias-corrected adaptive-moment update, in place."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SGD:
    learning_rate: float = 0.01
    t: int = 0

    def step(self, params, grads) -> None:
        for p, g in zip(params, grads):
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
        self.t += 1
        for p, g in zip(params, grads):
            p -= self.learning_rate * g


def adam_step(state: Adam, params, grads) -> None:
    state.step(params, grads)


def make_optimizer(name: str, learning_rate: float):
    if name == "adam":
        return Adam(learning_rate)
    if name == "sgd":
        return SGD(learning_rate)
    raise ValueError(f"unknown optimizer {name!r}")


# ----------------------------------------------------------------- grad checker

@dataclass
class GradCheckResult:
    passed: bool
    worst_relative_error: float
    n_checked: int

    def __bool__(self) -> bool:
        return self.passed


def relative_error(a, n, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(net, x, targets, h: float = 1e-5, tolerance: float = 1e-4,
                      max_entries: int | None = None, seed: int = 0,
                      grads=None) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``net`` must provide ``parameters()`` (arrays, mutated in place here and
    restored) and ``loss_and_grads(x, targets)``. With ``max_entries`` set,
    a seeded sample of that many entries is checked instead of every one.
    ``grads`` overrides the analytic gradients (for testing the checker).
    The check passes when the worst relative error is strictly below
    ``tolerance``.
    """
    params = net.parameters()
    if grads is None:
        _, grads = net.loss_and_grads(x, targets)
    sizes = [p.size for p in params]
    total = sum(sizes)
    if max_entries is None or max_entries >= total:
        flat_ids = np.arange(total)
    else:
        flat_ids = np.sort(np.random.default_rng(seed).choice(total, max_entries, replace=False))
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for fid in flat_ids:
        k = int(np.searchsorted(offsets, fid, side="right") - 1)
        p = params[k].reshape(-1)
        j = int(fid - offsets[k])
        old = p[j]
        p[j] = old + h
        lp = net.loss_and_grads(x, targets, need_grads=False)[0]
        p[j] = old - h
        lm = net.loss_and_grads(x, targets, need_grads=False)[0]
        p[j] = old
        num = (lp - lm) / (2.0 * h)
        ana = grads[k].reshape(-1)[j]
        err = float(relative_error(ana, num))
        if not math.isfinite(err):
            err = math.inf
        worst = max(worst, err)
    return GradCheckResult(worst < tolerance, worst, len(flat_ids))
