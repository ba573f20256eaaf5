"""Encoder + classifier head with hand-derived backward pass and AdamW.

The encoder maps input features to a ``d_emb`` embedding through GELU hidden
layers and a final linear layer. The classifier head maps the (raw) embedding
to C logits. Unit-normalized embeddings, used by the prototype and contrastive
terms, are produced by ``forward`` alongside the raw ones.

Weights are stored as ``(fan_in, fan_out)`` so a batch ``X`` maps to ``X @ W + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .numerics import (ConfigError, DimensionError, RngStream, gelu, gelu_grad, log_softmax,
                       normalize_rows, normalize_rows_backward, softmax)

ACTIVATIONS = ("gelu", "linear")
CHECKPOINT_FORMAT = "ipr-checkpoint"
CHECKPOINT_VERSION = 1


class UsageError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name}; step rejected")
        self.name = name


@dataclass
class Dense:
    W: np.ndarray
    b: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise DimensionError(f"bad layer shapes W{self.W.shape} b{self.b.shape}")


@dataclass
class ModelParams:
    encoder: list[Dense]
    classifier: list[Dense]

    def __post_init__(self):
        if not self.encoder or not self.classifier:
            raise DimensionError("encoder and classifier need at least one layer each")
        layers = self.encoder + self.classifier
        for prev, nxt in zip(layers, layers[1:]):
            if prev.W.shape[1] != nxt.W.shape[0]:
                raise DimensionError(
                    f"layer shapes do not chain: {prev.W.shape} -> {nxt.W.shape}")

    @property
    def d_in(self) -> int:
        return self.encoder[0].W.shape[0]

    @property
    def d_emb(self) -> int:
        return self.encoder[-1].W.shape[1]

    @property
    def n_classes(self) -> int:
        return self.classifier[-1].W.shape[1]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for part, layers in (("encoder", self.encoder), ("classifier", self.classifier)):
            for i, layer in enumerate(layers):
                yield f"{part}.{i}.W", layer.W
                yield f"{part}.{i}.b", layer.b

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    def copy(self) -> "ModelParams":
        def dup(layers):
            return [Dense(l.W.copy(), l.b.copy(), l.activation) for l in layers]
        return ModelParams(dup(self.encoder), dup(self.classifier))


def init_params(d_in: int, n_classes: int, hidden=(64, 64), d_emb: int = 32,
                classifier_hidden=(), rng: RngStream | None = None) -> ModelParams:
    """Random initialization: N(0, 1/fan_in) weights, zero biases."""
    rng = rng or RngStream(0)

    def build(sizes, last_activation):
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            act = "gelu" if i < len(sizes) - 2 else last_activation
            W = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
            layers.append(Dense(W, np.zeros(fan_out), act))
        return layers

    encoder = build([d_in, *hidden, d_emb], "linear")
    classifier = build([d_emb, *classifier_hidden, n_classes], "linear")
    return ModelParams(encoder, classifier)


def _run_layers(layers: list[Dense], X: np.ndarray, cache: list | None):
    for layer in layers:
        pre = X @ layer.W + layer.b
        out = gelu(pre) if layer.activation == "gelu" else pre
        if cache is not None:
            cache.append((X, pre))
        X = out
    return X


def _check_input(X, width: int, what: str) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != width:
        raise DimensionError(f"{what}: expected width {width}, got shape {np.shape(X)}")
    return X, single


def encode(params: ModelParams, x) -> np.ndarray:
    """Raw embedding for a vector (or batch of row vectors)."""
    X, single = _check_input(x, params.d_in, "encode")
    H = _run_layers(params.encoder, X, None)
    return H[0] if single else H


def classify(params: ModelParams, embedding) -> np.ndarray:
    """Logits for an embedding (or batch of embeddings)."""
    E, single = _check_input(embedding, params.d_emb, "classify")
    logits = _run_layers(params.classifier, E, None)
    return logits[0] if single else logits


@dataclass
class ForwardCache:
    encoder: list = field(default_factory=list)
    classifier: list = field(default_factory=list)
    unit: np.ndarray | None = None
    norms: np.ndarray | None = None


@dataclass
class ForwardResult:
    embedding: np.ndarray   # raw encoder output (N, d_emb)
    unit: np.ndarray        # row-normalized embedding
    logits: np.ndarray      # (N, C)
    cache: ForwardCache


def forward(params: ModelParams, X) -> ForwardResult:
    """Batched forward pass keeping the activations needed by ``backward``."""
    X, _ = _check_input(X, params.d_in, "forward")
    cache = ForwardCache()
    H = _run_layers(params.encoder, X, cache.encoder)
    logits = _run_layers(params.classifier, H, cache.classifier)
    unit, norms = normalize_rows(H)
    cache.unit, cache.norms = unit, norms
    return ForwardResult(H, unit, logits, cache)


def cross_entropy_loss(logits, target: int, weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Weighted CE of one logit vector against a class index, with its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    C = logits.shape[-1]
    if not 0 <= target < C:
        raise DimensionError(f"target {target} out of range for {C} classes")
    if weight < 0:
        raise ConfigError("class weight must be >= 0")
    if weight == 0:
        return 0.0, np.zeros(C)
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-weight * logp[target]), weight * grad


def cross_entropy_batch(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over a batch.

    ``targets`` is either an int array of class indices or an (N, C) array of
    soft target distributions.
    """
    N, C = logits.shape
    logp = log_softmax(logits)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.size and (targets.min() < 0 or targets.max() >= C):
            raise DimensionError(f"targets out of range for {C} classes")
        loss = -float(np.mean(logp[np.arange(N), targets]))
        grad = np.exp(logp)
        grad[np.arange(N), targets] -= 1.0
    else:
        loss = -float(np.mean(np.sum(targets * logp, axis=1)))
        grad = np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets
    return loss, grad / N


def _backprop_layers(layers: list[Dense], cache: list, grad: np.ndarray, prefix: str,
                     out: dict) -> np.ndarray:
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        X_in, pre = cache[i]
        if layer.activation == "gelu":
            grad = grad * gelu_grad(pre)
        out[f"{prefix}.{i}.W"] = X_in.T @ grad
        out[f"{prefix}.{i}.b"] = grad.sum(axis=0)
        grad = grad @ layer.W.T
    return grad


def backward(params: ModelParams, cache: ForwardCache | None, d_logits=None, d_unit=None,
             d_embedding=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every parameter.

    The loss may depend on the logits, the unit embedding and the raw
    embedding; pass the upstream gradient for each (None means zero).
    """
    if cache is None or not cache.encoder:
        raise UsageError("backward needs the cache of a preceding forward pass")
    grads: dict[str, np.ndarray] = {}
    N = cache.encoder[0][0].shape[0]
    d_emb = np.zeros((N, params.d_emb))
    if d_logits is not None:
        d_emb = d_emb + _backprop_layers(params.classifier, cache.classifier, d_logits,
                                         "classifier", grads)
    else:
        for i, layer in enumerate(params.classifier):
            grads[f"classifier.{i}.W"] = np.zeros_like(layer.W)
            grads[f"classifier.{i}.b"] = np.zeros_like(layer.b)
    if d_unit is not None:
        d_emb = d_emb + normalize_rows_backward(cache.unit, cache.norms, d_unit)
    if d_embedding is not None:
        d_emb = d_emb + d_embedding
    _backprop_layers(params.encoder, cache.encoder, d_emb, "encoder", grads)
    return grads


def add_grads(a: dict, b: dict, scale_b: float = 1.0) -> dict:
    return {k: a[k] + scale_b * b[k] for k in a}


def scale_grads(g: dict, s: float) -> dict:
    return {k: s * v for k, v in g.items()}


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("invalid AdamW hyperparameters")
        if self.weight_decay < 0 or not self.eps > 0:
            raise ConfigError("invalid AdamW hyperparameters")


def optimizer_step(params: ModelParams, grads: dict, state: OptimizerState):
    """One AdamW step in place: decoupled decay, then the bias-corrected Adam update."""
    named = list(params.named_arrays())
    for name, _ in named:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in named:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def _floats_to_str(a: np.ndarray) -> list[str]:
    return [repr(float(x)) for x in a.reshape(-1)]


def checkpoint_dict(params: ModelParams, extra: dict | None = None) -> dict:
    layers = []
    for part, group in (("encoder", params.encoder), ("classifier", params.classifier)):
        for layer in group:
            layers.append({"part": part, "activation": layer.activation,
                           "shape": list(layer.W.shape),
                           "W": _floats_to_str(layer.W), "b": _floats_to_str(layer.b)})
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "layers": layers, "extra": extra or {}}


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a recognized checkpoint (format/version mismatch)")
    parts: dict[str, list[Dense]] = {"encoder": [], "classifier": []}
    for layer in d["layers"]:
        shape = tuple(layer["shape"])
        W = np.array([float(x) for x in layer["W"]], dtype=np.float64).reshape(shape)
        b = np.array([float(x) for x in layer["b"]], dtype=np.float64)
        parts[layer["part"]].append(Dense(W, b, layer["activation"]))
    return ModelParams(parts["encoder"], parts["classifier"])


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(params, extra), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))


def predict(params: ModelParams, X) -> np.ndarray:
    return np.argmax(classify(params, encode(params, X)), axis=-1)


def probabilities(params: ModelParams, X) -> np.ndarray:
    return softmax(classify(params, encode(params, X)))
