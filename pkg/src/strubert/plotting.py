"""Figures for training reports and attention dumps (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(report: dict, path) -> Path:
    """Training loss per epoch, one line per fold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for fold in report.get("folds", [{"fold": "all", "history": report.get("history", [])}]):
        hist = fold["history"]
        ax.plot([h["epoch"] for h in hist], [h["loss"] for h in hist], marker=".", label=f"fold {fold['fold']}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title(f"{report['task']}  (seed {report['seed']}, config {report['config_hash']})", fontsize=9)
    ax.legend(fontsize=8)
    return _save(fig, path)


def fold_metrics(report: dict, path) -> Path:
    """Grouped bars of each fold's test metrics with the cross-fold mean."""
    folds = report["folds"]
    names = [k for k, v in report["mean"].items() if isinstance(v, float)]
    x = np.arange(len(names))
    width = 0.8 / (len(folds) + 1)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(names), 4))
    for i, fold in enumerate(folds):
        ax.bar(x + i * width, [fold["metrics"][n] for n in names], width, label=f"fold {fold['fold']}")
    ax.bar(x + len(folds) * width, [report["mean"][n] for n in names], width, color="k", label="mean")
    ax.set_xticks(x + 0.4 - width / 2, names)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"{report['task']} test metrics", fontsize=9)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def attention_heads(dump: dict, path) -> Path:
    """One heatmap per head of a miniBERT attention dump."""
    heads = np.asarray(dump["heads"])
    labels = dump["labels"]
    fig, axes = plt.subplots(1, len(heads), figsize=(3.2 * len(heads), 3.4), squeeze=False)
    for h, ax in enumerate(axes[0]):
        ax.imshow(heads[h], vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=6)
        ax.set_yticks(range(len(labels)), labels, fontsize=6)
        ax.set_title(f"head {h}", fontsize=9)
    return _save(fig, path)


def report_figures(report: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [loss_curves(report, out_dir / "loss.png")]
    if report.get("folds"):
        paths.append(fold_metrics(report, out_dir / "fold_metrics.png"))
    return paths
