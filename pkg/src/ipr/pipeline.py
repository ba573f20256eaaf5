"""Training loops: prototype refinement (``ipr``) and the three reference systems.

Modes:
    ipr            warm-up on D1, then D1 cross-entropy + beta-weighted
                   cross-entropy on prototype pseudo labels of D2 + mu-weighted
                   contrastive loss, with gated prototype updates
    baseline       D1 cross-entropy only; never touches D2
    baseline_plus  like ipr but D2 targets are the classifier's own argmax,
                   no prototypes, no contrastive term
    supervised     cross-entropy on D1 and D2 with the true D2 labels

An epoch is one pass over the labeled training set (D1, or D1+D2 for
``supervised``); D2 batches are drawn from a cycling, reshuffled stream.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .contrastive import CONTRASTIVE_MODES, AugmentationPolicy, ContrastiveBatch, augment_batch, contrastive_loss
from .data import SplitDataset, UnlabeledView
from .model import (ModelParams, OptimizerState, backward, classify, cross_entropy_batch, encode,
                    forward, init_params, optimizer_step)
from .numerics import ConfigError, RngStream, normalize_rows
from .prototypes import (SOFT_LABEL_MODES, PrototypeBank, gated_update, init_prototypes,
                         pairwise_similarity, soft_label_weights)

log = logging.getLogger(__name__)

MODES = ("ipr", "baseline", "baseline_plus", "supervised")
LR_SCHEDULES = ("constant", "cosine")
METRIC_COLUMNS = ("accuracy", "beta", "loss_precise", "loss_ambiguous", "loss_contrastive",
                  "agreement_model", "agreement_prototype")


class TrainingAbort(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    mode: str = "ipr"
    alpha: float = 1.0
    mu: float = 0.2
    weight_m: float = 0.5
    gamma: float = 0.99
    tau: float = 0.1
    soft_label_temperature: float = 0.1
    growth_rate: float = 5.0
    linear_ramp: bool = False
    beta_override: float | None = None
    epochs: int = 50
    warmup_epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-4
    lr_schedule: str = "cosine"
    weight_decay: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    contrastive_mode: str = "supcon"
    soft_label_mode: str = "softmax"
    update_all_classes: bool = False
    ambiguous_target: str = "hard"
    reinit_prototypes_each_epoch: bool = False
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    d_emb: int = 32
    classifier_hidden: list[int] = field(default_factory=list)
    augmentation: dict = field(default_factory=lambda: asdict(AugmentationPolicy()))

    def validate(self) -> None:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if min(self.alpha, self.mu, self.weight_m) < 0:
            problems.append("alpha, mu and weight_m must be >= 0")
        if not 0 <= self.gamma <= 1:
            problems.append("gamma must lie in [0, 1]")
        if min(self.tau, self.soft_label_temperature, self.growth_rate) <= 0:
            problems.append("tau, soft_label_temperature and growth_rate must be > 0")
        if self.growth_rate == 1 and not self.linear_ramp:
            problems.append("growth_rate == 1 is singular; set linear_ramp instead")
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            problems.append("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if self.lr_schedule not in LR_SCHEDULES:
            problems.append(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.batch_size < 1 or self.learning_rate <= 0:
            problems.append("batch_size must be >= 1 and learning_rate > 0")
        if not self.seeds or min(self.seeds) < 0:
            problems.append("seeds must be a non-empty list of non-negative integers")
        if self.contrastive_mode not in CONTRASTIVE_MODES:
            problems.append(f"contrastive_mode must be one of {CONTRASTIVE_MODES}")
        if self.soft_label_mode not in SOFT_LABEL_MODES:
            problems.append(f"soft_label_mode must be one of {SOFT_LABEL_MODES}")
        if self.ambiguous_target not in ("hard", "soft"):
            problems.append("ambiguous_target must be 'hard' or 'soft'")
        if self.beta_override is not None and self.beta_override < 0:
            problems.append("beta_override must be >= 0")
        try:
            self.policy()
        except (ConfigError, TypeError) as exc:
            problems.append(f"augmentation: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))

    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(**self.augmentation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        merged = cls().to_dict()
        if "augmentation" in d:
            merged["augmentation"].update(d["augmentation"])
            d = {k: v for k, v in d.items() if k != "augmentation"}
        merged.update(d)
        cfg = cls(**merged)
        cfg.validate()
        return cfg


def beta_schedule(epoch_c: int, config: TrainConfig) -> float:
    """Weight of the pseudo-label cross-entropy at a (1-based) epoch.

    Zero through warm-up; otherwise an exponential ramp from 0 at epoch 0 to
    ``weight_m`` at half of the epoch budget, held there afterwards.
    """
    if not 0 <= epoch_c <= config.epochs:
        raise ConfigError(f"epoch {epoch_c} outside [0, {config.epochs}]")
    if epoch_c <= config.warmup_epochs:
        return 0.0
    t = epoch_c / (config.epochs / 2)
    if config.linear_ramp:
        return min(config.weight_m * t, config.weight_m)
    r = config.growth_rate
    if r == 1:
        raise ConfigError("growth_rate == 1 is singular; use linear_ramp")
    return min(config.weight_m * (r ** t - 1.0) / (r - 1.0), config.weight_m)


def learning_rate_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate used throughout a (1-based) epoch."""
    if config.lr_schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / config.epochs))
    return config.learning_rate


def effective_beta(epoch_c: int, config: TrainConfig) -> float:
    if config.beta_override is not None:
        return 0.0 if epoch_c <= config.warmup_epochs else float(config.beta_override)
    return beta_schedule(epoch_c, config)


def combine_losses(loss_precise: float, loss_ambiguous: float, loss_contrastive: float,
                   alpha: float, beta: float, mu: float) -> float:
    return alpha * loss_precise + beta * loss_ambiguous + mu * loss_contrastive


@dataclass
class LossTerms:
    precise: float = 0.0
    ambiguous: float = 0.0
    contrastive: float = 0.0
    total: float = 0.0


@dataclass
class AmbiguousBatch:
    """Unlabeled batch with its augmented views and pre-assigned labels.

    ``targets`` are class indices (hard) or (N, C) soft targets for the
    cross-entropy term; ``view_labels`` are the 2N pseudo labels (anchors,
    then views) defining contrastive positives.
    """
    X: np.ndarray
    X_aug: np.ndarray | None
    targets: np.ndarray
    view_labels: np.ndarray | None = None


def precise_terms(params: ModelParams, X, y, alpha: float):
    fr = forward(params, X)
    loss, dlog = cross_entropy_batch(fr.logits, y)
    return loss, backward(params, fr.cache, d_logits=alpha * dlog), fr


def ambiguous_terms(params: ModelParams, fr, targets, view_labels, beta: float, mu: float,
                    tau: float, contrastive_mode: str):
    """Loss terms and gradients from a forward pass over [X; X_aug] (or just X)."""
    n = len(targets)
    logits_k = fr.logits[:n]
    loss_a, dlog_k = cross_entropy_batch(logits_k, targets)
    d_logits = np.zeros_like(fr.logits)
    d_logits[:n] = beta * dlog_k
    loss_c = 0.0
    d_unit = None
    if view_labels is not None:
        cb = ContrastiveBatch(fr.unit, view_labels, tau)
        loss_c, g_unit = contrastive_loss(cb, contrastive_mode)
        if mu:
            d_unit = mu * g_unit
    if not beta and d_unit is None:
        return loss_a, loss_c, None
    return loss_a, loss_c, backward(params, fr.cache, d_logits=d_logits, d_unit=d_unit)


def total_loss(params: ModelParams, X_precise, y_precise, ambiguous: AmbiguousBatch | None,
               beta: float, config: TrainConfig):
    """Combined objective and its parameter gradients."""
    loss_p, grads, _ = precise_terms(params, X_precise, y_precise, config.alpha)
    terms = LossTerms(precise=loss_p)
    if ambiguous is not None:
        X = ambiguous.X if ambiguous.X_aug is None else np.vstack([ambiguous.X, ambiguous.X_aug])
        fr = forward(params, X)
        terms.ambiguous, terms.contrastive, g_amb = ambiguous_terms(
            params, fr, ambiguous.targets, ambiguous.view_labels, beta, config.mu, config.tau,
            config.contrastive_mode)
        if g_amb is not None:
            grads = {k: grads[k] + g_amb[k] for k in grads}
    terms.total = combine_losses(terms.precise, terms.ambiguous, terms.contrastive,
                                 config.alpha, beta, config.mu)
    return terms, grads


def evaluate(params: ModelParams, X, y) -> float:
    """Fraction of samples whose classifier argmax matches the label."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    pred = np.argmax(classify(params, encode(params, X)), axis=-1)
    return float(np.mean(pred == y))


def agreement_rates(params: ModelParams, bank: PrototypeBank, X, y) -> tuple[float, float]:
    """(classifier agreement, prototype agreement) with the true labels, from one snapshot."""
    fr = forward(params, X)
    model_pred = np.argmax(fr.logits, axis=1)
    proto_pred = np.argmax(fr.unit @ bank.prototypes.T, axis=1)
    return float(np.mean(model_pred == y)), float(np.mean(proto_pred == y))


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    accuracy: float
    beta: float
    loss_precise: float
    loss_ambiguous: float = math.nan
    loss_contrastive: float = math.nan
    agreement_model: float = math.nan
    agreement_prototype: float = math.nan
    similarity: np.ndarray | None = None
    prototypes: np.ndarray | None = None
    gated_updates: int = 0


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


@dataclass
class RunMetrics:
    seed: int
    mode: str
    n_classes: int
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].accuracy

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch",) + METRIC_COLUMNS)
            for r in self.records:
                w.writerow([r.epoch] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS])

    def similarity_columns(self) -> list[str]:
        C = self.n_classes
        return [f"sim_{i}_{j}" for i in range(C) for j in range(C)]

    def write_similarity_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch"] + self.similarity_columns())
            for r in self.records:
                if r.similarity is None:
                    w.writerow([r.epoch] + [""] * self.n_classes ** 2)
                else:
                    w.writerow([r.epoch] + [_fmt(v) for v in r.similarity.reshape(-1)])

    def write_prototype_snapshots(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                if r.prototypes is not None:
                    fh.write(json.dumps({"epoch": r.epoch, "gated_updates": r.gated_updates,
                                         "prototypes": [[repr(float(v)) for v in row]
                                                        for row in r.prototypes]}) + "\n")


@dataclass
class PseudoLabelRow:
    id: str
    soft_label: list[float]
    pseudo_label: int
    classifier_label: int
    ground_truth: int | None


def build_pseudo_label_report(params: ModelParams, bank: PrototypeBank, view: UnlabeledView,
                              truth=None, temperature: float = 0.1,
                              mode: str = "softmax") -> list[PseudoLabelRow]:
    fr = forward(params, view.features)
    sims = fr.unit @ bank.prototypes.T
    soft = soft_label_weights(sims, temperature, mode)
    proto = np.argmax(sims, axis=1)
    clf = np.argmax(fr.logits, axis=1)
    rows = []
    for i, sid in enumerate(view.ids):
        gt = None if truth is None or truth[i] < 0 else int(truth[i])
        rows.append(PseudoLabelRow(sid, [float(v) for v in soft[i]], int(proto[i]),
                                   int(clf[i]), gt))
    return rows


def write_pseudo_label_report(rows: list[PseudoLabelRow], path) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r)) + "\n")


@dataclass
class RunResult:
    seed: int
    mode: str
    params: ModelParams
    metrics: RunMetrics
    bank: PrototypeBank | None = None
    report: list[PseudoLabelRow] | None = None
    config: TrainConfig | None = None

    @property
    def final_accuracy(self) -> float:
        return self.metrics.final_accuracy


class _Cycler:
    """Endless reshuffled index stream over n items."""

    def __init__(self, n: int, rng: RngStream):
        self.n = n
        self.rng = rng
        self._buf = np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while len(self._buf) < k:
            self._buf = np.concatenate([self._buf, self.rng.permutation(self.n)])
        out, self._buf = self._buf[:k], self._buf[k:]
        return out


def _train(dataset: SplitDataset, config: TrainConfig, seed: int, mode: str,
           on_epoch_end=None) -> RunResult:
    """One run. ``on_epoch_end(epoch, params, bank)`` is called after every epoch."""
    config.validate()
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    root = RngStream(seed)
    C = dataset.n_classes
    params = init_params(dataset.d_in, C, tuple(config.encoder_hidden), config.d_emb,
                         tuple(config.classifier_hidden), rng=root.substream("init"))
    opt = OptimizerState(config.learning_rate, config.adam_beta1, config.adam_beta2,
                         config.adam_eps, config.weight_decay)
    order_rng = root.substream("precise-order")
    X1, y1 = dataset.precise()
    X3, y3 = dataset.test()

    if mode in ("ipr", "baseline_plus") and not dataset.has_ambiguous():
        log.warning("D2 is empty; %s degrades to baseline", mode)
        mode_eff = "baseline"
    else:
        mode_eff = mode

    X2 = y2 = None
    if mode_eff == "supervised":
        if dataset.has_ambiguous():
            X2 = dataset.unlabeled().features
            y2 = dataset.ambiguous_truth()
            keep = y2 >= 0
            Xtr, ytr = np.vstack([X1, X2[keep]]), np.concatenate([y1, y2[keep]])
        else:
            Xtr, ytr = X1, y1
    else:
        Xtr, ytr = X1, y1
    if mode_eff in ("ipr", "baseline_plus"):
        view = dataset.unlabeled()
        X2 = view.features
        y2 = dataset.ambiguous_truth()
        cycler = _Cycler(len(X2), root.substream("ambiguous-order"))
    aug_rng = root.substream("augment")
    policy = config.policy()

    metrics = RunMetrics(seed, mode, C)
    bank: PrototypeBank | None = None
    B = config.batch_size
    n_batches = math.ceil(len(Xtr) / B)

    def init_bank() -> PrototypeBank:
        return init_prototypes(encode(params, X1), y1, C, config.gamma)

    if mode_eff == "ipr" and config.warmup_epochs == 0:
        bank = init_bank()

    for epoch in range(1, config.epochs + 1):
        warm = epoch <= config.warmup_epochs
        beta = effective_beta(epoch, config)
        opt.lr = learning_rate_at(epoch, config)
        phase = "warmup" if warm else mode_eff
        if (mode_eff == "ipr" and not warm and config.reinit_prototypes_each_epoch
                and epoch > config.warmup_epochs + 1):
            bank = init_bank()
        sums = np.zeros(3)
        n_amb = 0
        n_gated = 0
        perm = order_rng.permutation(len(Xtr))
        for b in range(n_batches):
            idx = perm[b * B:(b + 1) * B]
            loss_p, grads, _ = precise_terms(params, Xtr[idx], ytr[idx], config.alpha)
            loss_a = loss_c = 0.0
            gate = None
            if not warm and mode_eff in ("ipr", "baseline_plus"):
                Xk = X2[cycler.take(B)]
                if mode_eff == "ipr":
                    Xa = augment_batch(Xk, policy, aug_rng)
                    fr = forward(params, np.vstack([Xk, Xa]))
                    n = len(Xk)
                    sims = fr.unit @ bank.prototypes.T
                    soft = soft_label_weights(sims[:n], config.soft_label_temperature,
                                              config.soft_label_mode)
                    pseudo = np.argmax(sims, axis=1)
                    targets = pseudo[:n] if config.ambiguous_target == "hard" else soft
                    view_labels = pseudo
                    preds = np.argmax(fr.logits, axis=1)
                    gate = (fr.unit[:n].copy(), soft, preds[:n], preds[n:])
                else:
                    fr = forward(params, Xk)
                    targets = np.argmax(fr.logits, axis=1)
                    view_labels = None
                loss_a, loss_c, g_amb = ambiguous_terms(
                    params, fr, targets, view_labels, beta, config.mu, config.tau,
                    config.contrastive_mode)
                if g_amb is not None:
                    grads = {k: grads[k] + g_amb[k] for k in grads}
                n_amb += 1
            total = combine_losses(loss_p, loss_a, loss_c, config.alpha, beta, config.mu)
            if not math.isfinite(total):
                raise TrainingAbort(f"non-finite loss {total}", epoch, b)
            try:
                optimizer_step(params, grads, opt)
            except FloatingPointError as exc:
                raise TrainingAbort(str(exc), epoch, b) from exc
            if gate is not None:
                Zk, soft, pk, pa = gate
                for i in range(len(Zk)):
                    n_gated += gated_update(bank, Zk[i], soft[i], int(pk[i]), int(pa[i]),
                                            config.update_all_classes)
            sums += (loss_p, loss_a, loss_c)

        if mode_eff == "ipr" and epoch == config.warmup_epochs:
            bank = init_bank()

        rec = EpochRecord(epoch, phase, evaluate(params, X3, y3) if len(y3) else math.nan,
                          beta, sums[0] / n_batches)
        if n_amb:
            rec.loss_ambiguous = sums[1] / n_amb
            if mode_eff == "ipr":
                rec.loss_contrastive = sums[2] / n_amb
        if mode_eff == "ipr" and bank is not None:
            rec.agreement_model, rec.agreement_prototype = agreement_rates(params, bank, X2, y2)
            rec.similarity = pairwise_similarity(bank)
            rec.prototypes = bank.prototypes.copy()
            rec.gated_updates = n_gated
        elif mode_eff == "baseline_plus" and not warm:
            rec.agreement_model = evaluate(params, X2, y2)
        metrics.records.append(rec)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, bank)
        log.info("seed=%d epoch=%d phase=%s beta=%.4f loss_precise=%.5f loss_ambiguous=%s "
                 "loss_contrastive=%s acc=%.4f gated=%d", seed, epoch, phase, beta,
                 rec.loss_precise, _fmt(rec.loss_ambiguous), _fmt(rec.loss_contrastive),
                 rec.accuracy, n_gated)

    report = None
    if mode_eff == "ipr":
        report = build_pseudo_label_report(params, bank, view, y2,
                                           config.soft_label_temperature, config.soft_label_mode)
    return RunResult(seed, mode, params, metrics, bank, report, config)


def train_ipr(dataset: SplitDataset, config: TrainConfig, seed: int | None = None,
              on_epoch_end=None) -> RunResult:
    return _train(dataset, config, config.seeds[0] if seed is None else seed, "ipr", on_epoch_end)


def train_baseline(dataset: SplitDataset, config: TrainConfig, mode: str = "baseline",
                   seed: int | None = None, on_epoch_end=None) -> RunResult:
    if mode not in ("baseline", "baseline_plus", "supervised"):
        raise ConfigError(f"train_baseline cannot run mode {mode!r}")
    return _train(dataset, config, config.seeds[0] if seed is None else seed, mode, on_epoch_end)


def train(dataset: SplitDataset, config: TrainConfig, seed: int | None = None,
          on_epoch_end=None) -> RunResult:
    if config.mode == "ipr":
        return train_ipr(dataset, config, seed, on_epoch_end)
    return train_baseline(dataset, config, config.mode, seed, on_epoch_end)


@dataclass
class MultiSeedResult:
    mode: str
    runs: dict[int, RunResult]
    failures: dict[int, str]

    @property
    def accuracies(self) -> dict[int, float]:
        return {s: r.final_accuracy for s, r in self.runs.items()}

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.accuracies.values())))

    @property
    def std(self) -> float:
        acc = list(self.accuracies.values())
        return float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0

    def aggregate(self) -> dict:
        return {"mode": self.mode,
                "seeds": sorted(self.runs),
                "final_accuracy": {str(s): a for s, a in sorted(self.accuracies.items())},
                "mean_accuracy": self.mean if self.runs else None,
                "std_accuracy": self.std if self.runs else None,
                "failures": {str(s): m for s, m in sorted(self.failures.items())}}


def multi_seed(dataset: SplitDataset, config: TrainConfig) -> MultiSeedResult:
    """Independent runs per seed; failed seeds are reported and left out of the aggregate."""
    runs, failures = {}, {}
    for seed in config.seeds:
        try:
            runs[seed] = train(dataset, config, seed)
        except TrainingAbort as exc:
            log.warning("seed %d aborted: %s", seed, exc)
            failures[seed] = str(exc)
    if failures and runs:
        log.warning("aggregating over %d surviving seeds", len(runs))
    return MultiSeedResult(config.mode, runs, failures)
