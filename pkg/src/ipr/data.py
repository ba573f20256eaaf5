"""Feature datasets split by annotator agreement, plus a synthetic generator.

Splits:
    D1  precise, labeled training samples (high annotator agreement)
    D2  ambiguous training samples; labels are kept for evaluation only
    D3  most ambiguous labeled samples, used as the test set

Dataset files are JSON Lines: a header object followed by one sample per line.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .numerics import ConfigError, RngStream, softmax

log = logging.getLogger(__name__)

SPLITS = ("D1", "D2", "D3")
SCHEMA_VERSION = 1


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DatasetValidationError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureSample:
    id: str
    features: tuple[float, ...]
    label: int | None
    split: str
    votes: tuple[int, ...] | None = None

    def to_json(self) -> dict:
        return {"id": self.id, "split": self.split, "features": list(self.features),
                "label": self.label, "votes": None if self.votes is None else list(self.votes)}


@dataclass(frozen=True)
class UnlabeledView:
    """Ambiguous samples as the training code may see them: ids and features only."""
    ids: tuple[str, ...]
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


class SplitDataset:
    """Samples partitioned into D1/D2/D3.

    Every read of D2 records goes through ``unlabeled()`` or
    ``ambiguous_truth()``, which bump ``d2_access_count``.
    """

    def __init__(self, samples, n_classes: int, d_in: int, provenance: dict | None = None):
        self.samples = tuple(samples)
        self.n_classes = int(n_classes)
        self.d_in = int(d_in)
        self.provenance = dict(provenance or {})
        self.d2_access_count = 0
        self._by_split = {s: [x for x in self.samples if x.split == s] for s in SPLITS}

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplitDataset):
            return NotImplemented
        return (self.samples == other.samples and self.n_classes == other.n_classes
                and self.d_in == other.d_in and self.provenance == other.provenance)

    def __len__(self) -> int:
        return len(self.samples)

    def sizes(self) -> dict[str, int]:
        return {s: len(self._by_split[s]) for s in SPLITS}

    def _labeled(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        rows = self._by_split[split]
        X = np.array([r.features for r in rows], dtype=np.float64).reshape(len(rows), self.d_in)
        y = np.array([r.label for r in rows], dtype=np.int64)
        return X, y

    def precise(self) -> tuple[np.ndarray, np.ndarray]:
        """D1 features and labels."""
        return self._labeled("D1")

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        """D3 features and labels."""
        return self._labeled("D3")

    def unlabeled(self) -> UnlabeledView:
        self.d2_access_count += 1
        rows = self._by_split["D2"]
        X = np.array([r.features for r in rows], dtype=np.float64).reshape(len(rows), self.d_in)
        return UnlabeledView(tuple(r.id for r in rows), X)

    def ambiguous_truth(self) -> np.ndarray:
        """Hidden D2 labels. For evaluation and the supervised reference only."""
        self.d2_access_count += 1
        return np.array([-1 if r.label is None else r.label for r in self._by_split["D2"]],
                        dtype=np.int64)

    def has_ambiguous(self) -> bool:
        return bool(self._by_split["D2"])

    def without_ambiguous(self) -> "SplitDataset":
        return SplitDataset([s for s in self.samples if s.split != "D2"], self.n_classes,
                            self.d_in, self.provenance)

    def class_counts(self, split: str) -> list[int]:
        counts = [0] * self.n_classes
        for s in self._by_split[split]:
            if s.label is not None and 0 <= s.label < self.n_classes:
                counts[s.label] += 1
        return counts

    def mean_majority_fraction(self, split: str) -> float | None:
        fr = [max(s.votes) / sum(s.votes) for s in self._by_split[split] if s.votes]
        return float(np.mean(fr)) if fr else None


@dataclass
class SynthConfig:
    """Gaussian-cluster data with simulated annotators.

    Cluster means sit on orthogonal directions at radius
    ``separation * (1 - overlap)``; each class has a diagonal covariance whose
    per-class scale is ``cluster_std * class_std[c]``. Annotators vote by
    sampling from softmax(-distance to each mean / temperature), where the
    temperature is ``annotator_temperature * class_ambiguity[true class]``:
    some classes are simply harder for annotators to agree on.
    """
    n_classes: int = 4
    d_in: int = 16
    separation: float = 3.0
    cluster_std: float = 1.0
    overlap: float = 0.35
    class_std: list[float] | None = None
    class_weights: list[float] | None = None
    anisotropy: float = 0.0
    n_annotators: int = 6
    annotator_temperature: float = 1.0
    class_ambiguity: list[float] | None = None
    t_high: float = 0.9
    t_low: float = 0.6
    n_d1: int = 600
    n_d2: int = 1200
    n_d3: int = 140
    seed: int = 0
    max_draws: int = 2_000_000

    def validate(self) -> None:
        problems = []
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if self.d_in < self.n_classes:
            problems.append("d_in must be >= n_classes (orthogonal cluster directions)")
        if not 0.5 < self.t_low < self.t_high <= 1.0:
            problems.append("thresholds must satisfy 0.5 < t_low < t_high <= 1.0")
        if min(self.n_d1, self.n_d2, self.n_d3) <= 0:
            problems.append("split sizes must be positive")
        if self.n_annotators < 1:
            problems.append("n_annotators must be >= 1")
        if self.annotator_temperature < 0:
            problems.append("annotator_temperature must be >= 0")
        if self.cluster_std <= 0 or self.separation < 0:
            problems.append("cluster_std must be > 0 and separation >= 0")
        if not 0.0 <= self.overlap <= 1.0:
            problems.append("overlap must lie in [0, 1]")
        if not 0.0 <= self.anisotropy < 1.0:
            problems.append("anisotropy must lie in [0, 1)")
        for name in ("class_std", "class_weights", "class_ambiguity"):
            vals = getattr(self, name)
            if vals is not None and (len(vals) != self.n_classes or min(vals) <= 0):
                problems.append(f"{name} needs {self.n_classes} positive entries")
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SynthConfig fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Geometry:
    means: np.ndarray     # (C, d)
    scales: np.ndarray    # (C, d) per-dimension std
    weights: np.ndarray   # (C,) class prior
    ambiguity: np.ndarray  # (C,) annotator temperature multiplier


def _geometry(config: SynthConfig, rng: RngStream) -> _Geometry:
    C, d = config.n_classes, config.d_in
    q, _ = np.linalg.qr(rng.normal(size=(d, C)))
    means = q.T * config.separation * (1.0 - config.overlap)
    class_std = np.ones(C) if config.class_std is None else np.asarray(config.class_std, float)
    # per-dimension spread in [1 - a, 1 + a], fixed per class
    dim_spread = 1.0 + config.anisotropy * rng.uniform(-1.0, 1.0, size=(C, d))
    scales = config.cluster_std * class_std[:, None] * dim_spread
    w = np.ones(C) if config.class_weights is None else np.asarray(config.class_weights, float)
    amb = np.ones(C) if config.class_ambiguity is None else np.asarray(config.class_ambiguity,
                                                                       float)
    return _Geometry(means, scales, w / w.sum(), amb)


def annotate(config: SynthConfig, n: int, rng: RngStream, geometry: _Geometry | None = None):
    """Draw ``n`` samples with votes and their natural split assignment.

    Returns (features, labels, votes, splits) with splits as an array of
    "D1"/"D2"/"D3" strings.
    """
    geo = geometry or _geometry(config, rng.substream("geometry"))
    C = config.n_classes
    labels = rng.generator.choice(C, size=n, p=geo.weights)
    X = geo.means[labels] + rng.normal(size=(n, config.d_in)) * geo.scales[labels]
    dist = np.sqrt(((X[:, None, :] - geo.means[None, :, :]) ** 2).sum(axis=2))
    if config.annotator_temperature == 0:
        probs = np.zeros((n, C))
        probs[np.arange(n), np.argmin(dist, axis=1)] = 1.0
    else:
        temp = config.annotator_temperature * geo.ambiguity[labels]
        probs = softmax(-dist / temp[:, None])
    votes = np.stack([rng.multinomial(config.n_annotators, p) for p in probs])
    frac = votes.max(axis=1) / config.n_annotators
    splits = np.where(frac >= config.t_high, "D1", np.where(frac <= config.t_low, "D3", "D2"))
    return X, labels, votes, splits


def generate_synthetic(config: SynthConfig) -> SplitDataset:
    """Fill each split to its target size from a stream of annotated samples."""
    config.validate()
    root = RngStream(config.seed)
    geo = _geometry(config, root.substream("geometry"))
    stream = root.substream("samples")
    targets = {"D1": config.n_d1, "D2": config.n_d2, "D3": config.n_d3}
    kept: dict[str, list[FeatureSample]] = {s: [] for s in SPLITS}
    drawn = 0
    chunk = 4096
    while any(len(kept[s]) < targets[s] for s in SPLITS):
        if drawn >= config.max_draws:
            short = [s for s in SPLITS if len(kept[s]) < targets[s]]
            raise GenerationError(
                f"could not fill split(s) {short} after {drawn} draws; adjust t_high/t_low, "
                f"overlap or annotator_temperature")
        X, y, votes, splits = annotate(config, chunk, stream, geo)
        for i in range(chunk):
            s = str(splits[i])
            if len(kept[s]) < targets[s]:
                kept[s].append(FeatureSample(
                    id=f"s{drawn + i:07d}", features=tuple(float(v) for v in X[i]),
                    label=int(y[i]), split=s, votes=tuple(int(v) for v in votes[i])))
        drawn += chunk
    samples = sorted((x for s in SPLITS for x in kept[s]), key=lambda r: r.id)
    return SplitDataset(samples, config.n_classes, config.d_in,
                        {"generator": "synthetic", "config": config.to_dict()})


def validate_samples(samples, n_classes: int, d_in: int) -> list[str]:
    """All split/label/vote invariant violations, as readable strings."""
    problems = []
    seen = set()
    vote_total = None
    for s in samples:
        if s.id in seen:
            problems.append(f"{s.id}: duplicate id")
        seen.add(s.id)
        if s.split not in SPLITS:
            problems.append(f"{s.id}: unknown split {s.split!r}")
        if len(s.features) != d_in:
            problems.append(f"{s.id}: {len(s.features)} features, expected {d_in}")
        if not all(math.isfinite(v) for v in s.features):
            problems.append(f"{s.id}: non-finite feature value")
        if s.label is None:
            if s.split in ("D1", "D3"):
                problems.append(f"{s.id}: {s.split} sample without a label")
        elif not 0 <= s.label < n_classes:
            problems.append(f"{s.id}: label {s.label} out of range [0, {n_classes})")
        if s.votes is not None:
            if len(s.votes) != n_classes or min(s.votes) < 0:
                problems.append(f"{s.id}: vote histogram must have {n_classes} counts >= 0")
            total = sum(s.votes)
            if vote_total is None:
                vote_total = total
            elif total != vote_total:
                problems.append(f"{s.id}: votes sum to {total}, other samples to {vote_total}")
    present = {s.label for s in samples if s.split == "D1" and s.label is not None}
    for c in range(n_classes):
        if c not in present:
            problems.append(f"class {c} missing from D1")
    return problems


def _parse_sample(obj, lineno: int) -> FeatureSample:
    if not isinstance(obj, dict):
        raise DatasetFormatError(lineno, "sample must be a JSON object")
    for key in ("id", "split", "features"):
        if key not in obj:
            raise DatasetFormatError(lineno, f"missing field {key!r}")
    feats = obj["features"]
    if not isinstance(feats, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats):
        raise DatasetFormatError(lineno, "features must be a list of numbers")
    label = obj.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool)):
        raise DatasetFormatError(lineno, "label must be an integer or null")
    votes = obj.get("votes")
    if votes is not None and (not isinstance(votes, list)
                              or not all(isinstance(v, int) for v in votes)):
        raise DatasetFormatError(lineno, "votes must be a list of integers or null")
    return FeatureSample(str(obj["id"]), tuple(float(v) for v in feats), label,
                         str(obj["split"]), None if votes is None else tuple(votes))


def read_dataset(path) -> tuple[SplitDataset, list[str]]:
    """Parse a dataset file; returns the dataset and its invariant violations."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(1, "missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, f"invalid JSON header: {exc.msg}") from exc
    if not isinstance(header, dict) or "schema_version" not in header:
        raise DatasetFormatError(1, "missing header")
    if header["schema_version"] != SCHEMA_VERSION:
        raise DatasetFormatError(1, f"unsupported schema_version {header['schema_version']}")
    for key in ("C", "d_in"):
        if not isinstance(header.get(key), int):
            raise DatasetFormatError(1, f"header field {key!r} must be an integer")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(lineno, f"invalid JSON: {exc.msg}") from exc
        samples.append(_parse_sample(obj, lineno))
    ds = SplitDataset(samples, header["C"], header["d_in"], header.get("provenance"))
    return ds, validate_samples(samples, ds.n_classes, ds.d_in)


def load_dataset(path) -> SplitDataset:
    ds, problems = read_dataset(path)
    if problems:
        raise DatasetValidationError(problems)
    return ds


def save_dataset(dataset: SplitDataset, path) -> None:
    header = {"schema_version": SCHEMA_VERSION, "C": dataset.n_classes, "d_in": dataset.d_in,
              "provenance": dataset.provenance}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in dataset.samples:
            fh.write(json.dumps(s.to_json()) + "\n")


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    clamped_dims: list[int] = field(default_factory=list)

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "clamped_dims": self.clamped_dims}


def standardize(dataset: SplitDataset) -> tuple[SplitDataset, Standardizer]:
    """Z-score every split with statistics pooled over D1 and D2."""
    pool = [s for s in dataset.samples if s.split in ("D1", "D2")]
    if not any(s.split == "D1" for s in pool):
        raise ValueError("standardize needs a non-empty D1")
    X = np.array([s.features for s in pool], dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    clamped = [int(i) for i in np.flatnonzero(std == 0)]
    if clamped:
        log.warning("zero-variance dimensions %s; std clamped to 1", clamped)
        std[clamped] = 1.0
    scaler = Standardizer(mean, std, clamped)
    samples = [FeatureSample(s.id, tuple(float(v) for v in scaler.apply(s.features)),
                             s.label, s.split, s.votes) for s in dataset.samples]
    prov = dict(dataset.provenance)
    prov["standardizer"] = scaler.to_dict()
    return SplitDataset(samples, dataset.n_classes, dataset.d_in, prov), scaler
