"""Dense-layer forward/backward primitives, the AdamW optimizer, the warmup+cosine
learning-rate schedule, and a central-difference gradient checker.

Everything works on float64 numpy arrays and plain ``dict[str, ndarray]`` parameter
maps so that training loops, checkpoints, and the gradient checker share one
representation. No autodiff: every backward pass in this package is written by hand
and validated against :func:`grad_check`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Parameter and gradient maps. Keys are stable, dot-separated names
# (e.g. "ap1.w"); values are float64 arrays updated in place by the optimizer.
Params = dict[str, np.ndarray]


@dataclass
class DenseLayer:
    """A fully-connected layer y = W x + b with W of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("dense layer expects a 2-d weight matrix and 1-d bias")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"weight rows {self.weights.shape[0]} != bias length {self.bias.shape[0]}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("dense layer parameters must be finite")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


def init_dense(n_in: int, n_out: int, rng: np.random.Generator) -> DenseLayer:
    """Seeded uniform init in [-a, a] with a = sqrt(6 / (in + out))."""
    a = math.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-a, a, size=(n_out, n_in))
    b = np.zeros(n_out)
    return DenseLayer(w, b)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"input length {x.shape[-1]} != layer in-dim {layer.n_in}")
    return x @ layer.weights.T + layer.bias


def dense_backward(
    layer: DenseLayer, x: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``dense_forward`` for a single input vector.

    Returns (grad_weights, grad_bias, grad_x) for upstream = dL/dy.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != (layer.n_in,) or upstream.shape != (layer.n_out,):
        raise ValueError("dense_backward shape mismatch")
    grad_w = np.outer(upstream, x)
    grad_b = upstream.copy()
    grad_x = layer.weights.T @ upstream
    return grad_w, grad_b, grad_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(pre_activation: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(pre_activation > 0.0, upstream, 0.0)


def softmax_binary(logits: np.ndarray) -> float:
    """Abnormal probability from a (normal, abnormal) logit pair.

    Computed as exp(l_abn) / (exp(l_abn) + exp(l_nor)) with max-subtraction,
    so extreme logits saturate to 0/1 instead of overflowing.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (2,):
        raise ValueError("softmax_binary expects exactly two logits")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    m = logits.max()
    e = np.exp(logits - m)
    return float(e[1] / (e[0] + e[1]))


def softmax_binary_grad(p_abnormal: float) -> np.ndarray:
    """d p_abn / d (l_nor, l_abn) given the forward output."""
    g = p_abnormal * (1.0 - p_abnormal)
    return np.array([-g, g])


@dataclass
class LrSchedule:
    """Linear warmup 0 -> lr_max over warmup_epochs, then cosine down to lr_min."""

    warmup_epochs: int
    total_epochs: int
    lr_max: float
    lr_min: float = 0.0

    def __post_init__(self) -> None:
        if self.warmup_epochs <= 0 or self.total_epochs <= 0:
            raise ValueError("warmup_epochs and total_epochs must be positive")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs must not exceed total_epochs")


def schedule_lr(sched: LrSchedule, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch in [0, total_epochs]."""
    if epoch < 0 or epoch > sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    if epoch < sched.warmup_epochs:
        return sched.lr_max * epoch / sched.warmup_epochs
    span = sched.total_epochs - sched.warmup_epochs
    if span == 0:
        return sched.lr_max if epoch < sched.total_epochs else sched.lr_min
    t = (epoch - sched.warmup_epochs) / span
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Moments are allocated lazily per parameter name so one optimizer instance
    can drive any parameter map. ``step`` mutates the parameter arrays in place:

        p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * p
    """

    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def step(self, params: Params, grads: Params, lr: float) -> None:
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in params:
            p = params[name]
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay != 0.0:
                p -= lr * self.weight_decay * p


def flatten_params(params: Params) -> np.ndarray:
    keys = sorted(params)
    return np.concatenate([params[k].ravel() for k in keys])


def grad_check(fn, params: Params, analytic: Params, h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` maps a parameter map to a scalar loss. Each coordinate is perturbed
    by +-h in a deep copy of ``params``; the per-coordinate relative error is
    |analytic - numeric| / max(1, |numeric|).
    """
    worst = 0.0
    for name in sorted(params):
        base = params[name]
        ana = np.asarray(analytic[name], dtype=np.float64)
        if ana.shape != base.shape:
            raise ValueError(f"analytic gradient shape mismatch for {name!r}")
        flat_idx = np.ndindex(base.shape)
        for idx in flat_idx:
            probe = {k: v.copy() for k, v in params.items()}
            probe[name][idx] = base[idx] + h
            up = fn(probe)
            probe[name][idx] = base[idx] - h
            down = fn(probe)
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError("non-finite loss during gradient check")
            numeric = (up - down) / (2.0 * h)
            err = abs(ana[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
