"""Numerical kernel: dense layers with analytic gradients, activations,
seeded RNG streams, Adam, and a finite-difference gradient checker.

Everything runs in float64; determinism matters more than speed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_SEED_MASK = (1 << 63) - 1


def make_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent stream addressed by (seed, tags); same address, same stream."""
    entropy = [int(seed) & _SEED_MASK] + [int(t) & _SEED_MASK for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derived_seed(seed: int, *tags: int) -> int:
    """A plain integer seed derived from (seed, tags), for APIs that take one."""
    entropy = [int(seed) & _SEED_MASK] + [int(t) & _SEED_MASK for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def softplus(x):
    # log(1 + e^x) without overflow for large |x|
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def softmax(x, axis: int = -1):
    """Max-shifted softmax; -inf entries map to exactly 0.

    A slice whose entries are all -inf has no defined distribution and
    raises ValueError.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax undefined: a slice has no finite entry")
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def std_normal_sample(rng: np.random.Generator, shape=None):
    return rng.standard_normal() if shape is None else rng.standard_normal(shape)


def std_normal_cdf(x):
    return ndtr(np.asarray(x, dtype=np.float64))


def std_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def coefficient_of_variation(v) -> float:
    """Population std over mean; 0 for an all-zero vector (by convention)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("coefficient of variation of an empty vector")
    mean = v.mean()
    if mean == 0.0:
        return 0.0
    return float(v.std() / mean)


def cv_squared_gradient(v) -> np.ndarray:
    """Gradient of CV(v)^2 = var(v) / mean(v)^2, population convention."""
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    mean = v.mean()
    if mean == 0.0:
        return np.zeros_like(v)
    var = v.var()
    return (2.0 * (v - mean) / n) / mean**2 - 2.0 * var / (n * mean**3)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


@dataclass
class DenseLayer:
    """Affine map x -> x @ weight + bias with weight shaped (in_dim, out_dim)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("weight must be (in, out) with bias of length out")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def glorot(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        weight = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        return cls(weight=weight, bias=np.zeros(out_dim))


def dense_forward(layer: DenseLayer, x):
    """x @ W + b for a single vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != layer in_dim {layer.in_dim}")
    return x @ layer.weight + layer.bias


def dense_backward(layer: DenseLayer, x, upstream):
    """Gradients (d_weight, d_bias, d_input) of the affine map.

    Accepts a single vector or a batch; batch contributions sum into the
    weight and bias gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    up2 = np.atleast_2d(upstream)
    if x2.shape[1] != layer.in_dim or up2.shape[1] != layer.out_dim:
        raise ValueError("shape mismatch in dense_backward")
    if x2.shape[0] != up2.shape[0]:
        raise ValueError("input and upstream batch sizes differ")
    d_weight = x2.T @ up2
    d_bias = up2.sum(axis=0)
    d_input = up2 @ layer.weight.T
    return d_weight, d_bias, d_input[0] if single else d_input


class Adam:
    """Adaptive-moment optimizer over a dict of named parameter arrays."""

    def __init__(self, params: dict, learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p) for k, p in params.items()}
        self._v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        """Update params in place from grads; raises on non-finite gradients."""
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for key, p in params.items():
            g = grads[key]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {key!r}")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for {key!r}")
            m = self._m[key]
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise then reduced."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
