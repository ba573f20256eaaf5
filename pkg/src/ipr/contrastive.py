"""Feature-space augmentation and the pseudo-label contrastive loss.

A batch holds N anchors followed by their N augmented views, so row ``i`` and
row ``i + N`` form a pair. In ``supcon`` mode every other row sharing the
anchor's pseudo label is a positive (the paired view always is); in
``pairwise_ntxent`` mode only the paired view is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, DimensionError, RngStream, logsumexp

CONTRASTIVE_MODES = ("supcon", "pairwise_ntxent")


@dataclass
class AugmentationPolicy:
    """Stochastic feature-space view generator.

    Transforms run in order mix -> scale -> noise -> dropout, each with
    probability ``p_apply``. Mixing draws its partner from the same batch.
    """
    noise_std: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    dropout: float = 0.1
    mix_range: tuple[float, float] = (0.0, 0.2)
    p_apply: float = 1.0

    def __post_init__(self):
        self.scale_range = tuple(float(x) for x in self.scale_range)
        self.mix_range = tuple(float(x) for x in self.mix_range)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.scale_range
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0 < lo <= hi:
            raise ConfigError("scale_range must be positive with low <= high")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout rate must lie in [0, 1)")
        mlo, mhi = self.mix_range
        if not 0 <= mlo <= mhi <= 1:
            raise ConfigError("mix_range must satisfy 0 <= low <= high <= 1")
        if not 0 <= self.p_apply <= 1:
            raise ConfigError("p_apply must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(noise_std=0.0, scale_range=(1.0, 1.0), dropout=0.0, mix_range=(0.0, 0.0))


def augment_batch(X: np.ndarray, policy: AugmentationPolicy, rng: RngStream) -> np.ndarray:
    """Augment each row of X. Consumes a fixed number of draws per call."""
    X = np.asarray(X, dtype=np.float64)
    N, d = X.shape
    p = policy.p_apply
    gate = rng.random((N, 4)) < p

    partner = X[rng.permutation(N)]
    lam = rng.uniform(*policy.mix_range, size=N) * gate[:, 0]
    out = (1.0 - lam)[:, None] * X + lam[:, None] * partner

    scale = rng.uniform(*policy.scale_range, size=N)
    out = out * np.where(gate[:, 1], scale, 1.0)[:, None]

    noise = rng.normal(0.0, 1.0, size=(N, d)) * policy.noise_std
    out = out + noise * gate[:, 2][:, None]

    keep = rng.random((N, d)) >= policy.dropout
    out = np.where(keep | ~gate[:, 3][:, None], out, 0.0)
    return out


def augment(x, policy: AugmentationPolicy, rng: RngStream) -> np.ndarray:
    """Augmented copy of a single vector (mixing needs a batch, so it is a no-op here)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("augment expects a single vector")
    return augment_batch(x[None, :], policy, rng)[0]


@dataclass
class ContrastiveBatch:
    embeddings: np.ndarray   # (2N, d): anchors then augmented views
    labels: np.ndarray       # (2N,) pseudo labels
    tau: float = 0.1

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        M = self.embeddings.shape[0]
        if M == 0 or M % 2:
            raise DimensionError("contrastive batch needs an even, non-zero number of rows")
        if self.labels.shape != (M,):
            raise DimensionError("one pseudo label per embedding required")
        if not self.tau > 0:
            raise ConfigError("temperature must be > 0")

    @classmethod
    def from_views(cls, anchors, augmented, anchor_labels, augmented_labels, tau=0.1):
        anchors = np.asarray(anchors, dtype=np.float64)
        augmented = np.asarray(augmented, dtype=np.float64)
        if anchors.shape != augmented.shape:
            raise DimensionError("anchors and augmented views must pair up")
        return cls(np.concatenate([anchors, augmented]),
                   np.concatenate([np.asarray(anchor_labels), np.asarray(augmented_labels)]),
                   tau)

    @property
    def n_pairs(self) -> int:
        return self.embeddings.shape[0] // 2


def positive_mask(labels: np.ndarray, mode: str = "supcon") -> np.ndarray:
    M = labels.shape[0]
    N = M // 2
    pair = np.zeros((M, M), dtype=bool)
    idx = np.arange(M)
    pair[idx, (idx + N) % M] = True
    if mode == "pairwise_ntxent":
        return pair
    if mode != "supcon":
        raise ConfigError(f"unknown contrastive mode {mode!r}")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return same | pair


def loss_from_similarity(S: np.ndarray, positives: np.ndarray, tau: float):
    """Loss and dL/dS for a similarity table S; diagonal entries are ignored.

    Returns (loss, dS, n_skipped) where anchors without positives are skipped.
    """
    M = S.shape[0]
    logits = S / tau
    off = ~np.eye(M, dtype=bool)
    masked = np.where(off, logits, -np.inf)
    lse = logsumexp(masked, axis=1)
    n_pos = positives.sum(axis=1)
    valid = n_pos > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(S), M
    pos_sum = np.where(positives, logits, 0.0).sum(axis=1)
    per_anchor = np.zeros(M)
    per_anchor[valid] = lse[valid] - pos_sum[valid] / n_pos[valid]
    loss = float(per_anchor[valid].sum() / n_valid)

    probs = np.where(off, np.exp(masked - lse[:, None]), 0.0)
    G = probs - positives / np.maximum(n_pos, 1)[:, None]
    G[~valid] = 0.0
    dS = G / (tau * n_valid)
    return loss, dS, M - n_valid


def contrastive_loss(batch: ContrastiveBatch, mode: str = "supcon") -> tuple[float, np.ndarray]:
    """Mean per-anchor contrastive loss over all 2N rows and its gradient wrt the rows."""
    Z = batch.embeddings
    S = Z @ Z.T
    loss, dS, _ = loss_from_similarity(S, positive_mask(batch.labels, mode), batch.tau)
    grad = (dS + dS.T) @ Z
    return loss, grad
