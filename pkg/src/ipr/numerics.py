"""Dense vector helpers, activations and a finite-difference gradient oracle.

Vectors and matrices are plain float64 numpy arrays. Functions that take a
single vector validate their input; the batched variants used in the training
loop skip per-call validation for speed.
"""

from __future__ import annotations

import math
import zlib
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(ValueError):
    """Input has no defined result (e.g. normalizing a zero vector)."""


class ConfigError(ValueError):
    """Invalid hyperparameter or configuration value."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite function value."""


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    return arr


def dot(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"dot: dimension mismatch {a.shape[0]} vs {b.shape[0]}")
    total = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        total += x * y
    return total


def l2_normalize(v) -> np.ndarray:
    """Return ``v / ||v||``; raises DegenerateInputError for the zero vector."""
    v = as_vector(v)
    norm = math.sqrt(float(np.dot(v, v)))
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / norm


def normalize_rows(X: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalization. Returns (unit rows, norms)."""
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    return X / np.maximum(norms, eps)[:, None], norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray,
                            eps: float = 1e-12) -> np.ndarray:
    """Backpropagate through ``normalize_rows``."""
    radial = np.einsum("ij,ij->i", unit, grad_unit)
    return (grad_unit - unit * radial[:, None]) / np.maximum(norms, eps)[:, None]


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    """Max-shifted softmax along the last axis, with ``v / temperature`` as logits."""
    if not temperature > 0:
        raise ConfigError(f"softmax temperature must be > 0, got {temperature}")
    x = np.asarray(v, dtype=np.float64) / temperature
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; smooth everywhere so finite differences behave
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ConfigError(f"finite difference step must be > 0, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


class RngStream:
    """Seeded random stream (PCG64). Named substreams are derived deterministically.

    Instances are single-owner: hand each consumer its own substream.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._key = _key
        self._seq = np.random.SeedSequence(self.seed, spawn_key=_key)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def substream(self, name: str) -> "RngStream":
        # crc32 is stable across processes, unlike hash()
        return RngStream(self.seed, self._key + (zlib.crc32(name.encode("utf-8")),))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def multinomial(self, n, pvals, size=None):
        return self.generator.multinomial(n, pvals, size)

    def bytes(self, n: int) -> bytes:
        return self.generator.bytes(n)
