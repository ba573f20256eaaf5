"""Class prototypes on the unit sphere.

Prototypes start as the normalized class means of labeled embeddings. Unlabeled
embeddings are scored against every prototype (dot products of unit vectors),
which yields a soft label over classes and a hard pseudo label. A prototype is
moved toward an unlabeled embedding by a momentum step only when the
classifier agrees with itself on the sample and on its augmented view.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, DegenerateInputError, DimensionError, l2_normalize, softmax

log = logging.getLogger(__name__)

SOFT_LABEL_MODES = ("softmax", "raw_clamped")


class PrototypeInitError(ValueError):
    pass


@dataclass
class PrototypeBank:
    prototypes: np.ndarray          # (C, d), unit rows
    gamma: float = 0.99
    update_counts: np.ndarray | None = None
    skipped_updates: int = 0

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 2:
            raise DimensionError("a prototype bank needs at least 2 classes")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.update_counts is None:
            self.update_counts = np.zeros(self.n_classes, dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.gamma, self.update_counts.copy(),
                             self.skipped_updates)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma,
                "prototypes": [[repr(float(x)) for x in row] for row in self.prototypes],
                "update_counts": self.update_counts.tolist(),
                "skipped_updates": self.skipped_updates}

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeBank":
        protos = np.array([[float(x) for x in row] for row in d["prototypes"]])
        return cls(protos, float(d["gamma"]), np.array(d["update_counts"], dtype=np.int64),
                   int(d.get("skipped_updates", 0)))


@dataclass
class SoftLabel:
    weights: np.ndarray
    similarities: np.ndarray
    sample_id: str | None = None


@dataclass(frozen=True)
class PseudoLabel:
    index: int
    confidence: float


def init_prototypes(embeddings, labels, n_classes: int, gamma: float = 0.99) -> PrototypeBank:
    """Normalized mean of the normalized embeddings of each class."""
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if E.ndim != 2 or E.shape[0] != labels.shape[0]:
        raise DimensionError("embeddings and labels are misaligned")
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero embedding cannot seed a prototype")
    E = E / norms[:, None]
    protos = np.empty((n_classes, E.shape[1]))
    for c in range(n_classes):
        members = E[labels == c]
        if len(members) == 0:
            raise PrototypeInitError(f"class {c} has no labeled samples")
        try:
            protos[c] = l2_normalize(members.mean(axis=0))
        except DegenerateInputError as exc:
            raise PrototypeInitError(f"class {c} members average to the zero vector") from exc
    return PrototypeBank(protos, gamma)


def _check_dim(bank: PrototypeBank, K: np.ndarray) -> None:
    if K.shape[-1] != bank.dim:
        raise DimensionError(f"embedding dim {K.shape[-1]} != prototype dim {bank.dim}")


def similarities(bank: PrototypeBank, K) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    _check_dim(bank, K)
    return K @ bank.prototypes.T


def soft_label_weights(sims: np.ndarray, temperature: float = 0.1,
                       mode: str = "softmax") -> np.ndarray:
    """Map raw prototype similarities to soft-label weights (row-wise)."""
    if mode == "softmax":
        return softmax(sims, temperature)
    if mode == "raw_clamped":
        return np.clip(sims, 0.0, 1.0)
    raise ConfigError(f"unknown soft label mode {mode!r}")


def soft_label(bank: PrototypeBank, k, temperature: float = 0.1, mode: str = "softmax",
               sample_id: str | None = None) -> SoftLabel:
    sims = similarities(bank, np.asarray(k, dtype=np.float64).reshape(-1))
    return SoftLabel(soft_label_weights(sims, temperature, mode), sims, sample_id)


def pseudo_label(bank: PrototypeBank, k) -> PseudoLabel:
    """Most similar prototype; ties go to the lowest class index."""
    sims = similarities(bank, np.asarray(k, dtype=np.float64).reshape(-1))
    z = int(np.argmax(sims))
    return PseudoLabel(z, float(sims[z]))


def pseudo_labels(bank: PrototypeBank, K) -> np.ndarray:
    return np.argmax(similarities(bank, K), axis=-1)


def _momentum_step(bank: PrototypeBank, c: int, k: np.ndarray, weight: float) -> bool:
    g = bank.gamma
    if g == 1.0:
        # no movement; skip the renormalization so the bank stays bit-identical
        bank.update_counts[c] += 1
        return True
    try:
        bank.prototypes[c] = l2_normalize(g * bank.prototypes[c] + (1.0 - g) * k * weight)
    except DegenerateInputError:
        bank.skipped_updates += 1
        log.warning("prototype %d update degenerate (zero vector); skipped", c)
        return False
    bank.update_counts[c] += 1
    return True


def gated_update(bank: PrototypeBank, k, soft: SoftLabel | np.ndarray, pred: int, pred_aug: int,
                 update_all_classes: bool = False) -> bool:
    """Momentum-update prototypes from one unlabeled embedding, in place.

    Nothing happens unless ``pred == pred_aug``. By default only the agreed
    class moves, weighted by its soft-label weight; with
    ``update_all_classes`` every class moves by its own weight. Returns True
    if any prototype changed.
    """
    if pred != pred_aug:
        return False
    weights = soft.weights if isinstance(soft, SoftLabel) else np.asarray(soft)
    if weights.shape != (bank.n_classes,):
        raise DimensionError("soft label is not aligned with the prototype bank")
    k = np.asarray(k, dtype=np.float64)
    if update_all_classes:
        applied = False
        for c in range(bank.n_classes):
            applied |= _momentum_step(bank, c, k, float(weights[c]))
        return applied
    if not 0 <= pred < bank.n_classes:
        raise DimensionError(f"predicted class {pred} out of range")
    return _momentum_step(bank, pred, k, float(weights[pred]))


def pairwise_similarity(bank: PrototypeBank) -> np.ndarray:
    P = bank.prototypes
    return P @ P.T
