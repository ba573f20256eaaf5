"""Figures rendered from tidy curve rows (epoch, seed, metric, value)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _series(rows, metric):
    by_seed = defaultdict(list)
    for epoch, seed, m, value in rows:
        if m == metric and value is not None:
            by_seed[seed].append((epoch, value))
    return {s: np.array(sorted(v)) for s, v in by_seed.items() if v}


def _mean_curve(series):
    epochs = sorted({int(e) for arr in series.values() for e in arr[:, 0]})
    means = []
    for e in epochs:
        vals = [arr[arr[:, 0] == e, 1] for arr in series.values()]
        means.append(np.mean(np.concatenate(vals)))
    return np.array(epochs), np.array(means)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metric(rows, metrics, path, title="", ylabel="") -> Path | None:
    """One line per seed (thin) plus the seed mean (thick) for each metric."""
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for i, metric in enumerate(metrics):
        series = _series(rows, metric)
        if not series:
            continue
        color = f"C{i}"
        for arr in series.values():
            ax.plot(arr[:, 0], arr[:, 1], color=color, alpha=0.25, lw=0.8)
        ep, mean = _mean_curve(series)
        ax.plot(ep, mean, color=color, lw=2, label=metric)
        drawn = True
    if not drawn:
        plt.close(fig)
        return None
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_prototype_similarity(rows, n_classes: int, path) -> Path | None:
    """Seed-mean similarity of every prototype pair over epochs."""
    pairs = [(i, j) for i in range(n_classes) for j in range(i + 1, n_classes)]
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for k, (i, j) in enumerate(pairs):
        series = _series(rows, f"sim_{i}_{j}")
        if not series:
            continue
        ep, mean = _mean_curve(series)
        ax.plot(ep, mean, color=f"C{k % 10}", label=f"{i}-{j}")
        drawn = True
    if not drawn:
        plt.close(fig)
        return None
    ax.set_xlabel("epoch")
    ax.set_ylabel("cosine similarity")
    ax.set_title("prototype similarity")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, Path(path))


def render_figures(rows, n_classes: int, stem) -> list[Path]:
    """Write the standard figure set next to ``stem`` (a path without suffix)."""
    stem = Path(stem)
    out = [
        plot_metric(rows, ["accuracy"], stem.with_name(stem.name + "_accuracy.png"),
                    "D3 accuracy", "accuracy"),
        plot_metric(rows, ["agreement_model", "agreement_prototype"],
                    stem.with_name(stem.name + "_agreement.png"), "D2 agreement rate",
                    "agreement"),
        plot_metric(rows, ["loss_precise", "loss_ambiguous", "loss_contrastive"],
                    stem.with_name(stem.name + "_losses.png"), "loss terms", "loss"),
        plot_prototype_similarity(rows, n_classes, stem.with_name(stem.name + "_similarity.png")),
    ]
    return [p for p in out if p is not None]
