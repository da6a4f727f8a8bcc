"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_confusion_pair(real, generated, path, titles=("real samples", "generated samples")):
    """Side-by-side row-normalised confusion matrices."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.4))
        for ax, m, title in zip(axes, (real, generated), titles):
            im = ax.imshow(m, cmap="viridis", vmin=0, vmax=1)
            ax.set_title(title)
            ax.set_xlabel("predicted class")
            ax.set_ylabel("label")
        fig.colorbar(im, ax=list(axes), shrink=0.8)
        return _save(fig, path)


def plot_confusion(matrix, path, title=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(matrix, cmap="viridis")
        ax.set_title(title)
        ax.set_xlabel("predicted class")
        ax.set_ylabel("label")
        fig.colorbar(im, ax=ax)
        return _save(fig, path)


def plot_losses(records, path):
    """Loss curves from the per-iteration metrics log."""
    if not records:
        return None
    it = np.array([r["iter"] for r in records])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 2.8))
        for key in ("head", "ens", "feat"):
            axes[0].plot(it, [r[key] for r in records], label=key, lw=0.8)
        axes[0].set_title("student terms")
        axes[0].set_yscale("log")
        axes[0].legend()
        axes[1].plot(it, [r["bn"] for r in records], lw=0.8, color="C3")
        axes[1].set_title("BN statistics loss")
        axes[2].plot(it, [r["lr_s"] for r in records], label="student", lw=0.8)
        axes[2].plot(it, [r["lr_g"] for r in records], label="generator", lw=0.8)
        axes[2].set_yscale("log")
        axes[2].set_title("learning rates")
        axes[2].legend()
        for ax in axes:
            ax.set_xlabel("iteration")
        return _save(fig, path)


def plot_accuracies(report: dict, path):
    labels, values = [], []
    for n, a in enumerate(report.get("teacher_accs") or []):
        labels.append(f"T{n + 1}")
        values.append(a)
    if report.get("teacher_ensemble_acc") is not None:
        labels.append("T ens")
        values.append(report["teacher_ensemble_acc"])
    for n, a in enumerate(report.get("per_header_acc") or []):
        labels.append(f"S{n + 1}")
        values.append(a)
    if report.get("ensemble_acc") is not None:
        labels.append("S avg")
        values.append(report["ensemble_acc"])
    if report.get("attention_acc") is not None:
        labels.append("S attn")
        values.append(report["attention_acc"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.55 * len(labels) + 1.5, 2.8))
        colors = ["C0" if lab.startswith("T") else "C1" for lab in labels]
        ax.bar(labels, values, color=colors)
        lo = max(0.0, min(values) - 10) if values else 0
        ax.set_ylim(lo, 100)
        ax.set_ylabel("top-1 accuracy (%)")
        for i, v in enumerate(values):
            ax.text(i, v + 0.3, f"{v:.1f}", ha="center", va="bottom", fontsize=7)
        return _save(fig, path)


def plot_gradcam(images, maps, row_labels, col_labels, path):
    """``images``: list of (H, W, C) arrays in [0, 1]; ``maps[i][j]`` heat map of
    model j on image i."""
    n, k = len(images), len(col_labels)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, k + 1, figsize=(1.4 * (k + 1), 1.4 * n), squeeze=False)
        for i in range(n):
            axes[i][0].imshow(images[i])
            axes[i][0].set_ylabel(row_labels[i])
            for j in range(k):
                axes[i][j + 1].imshow(images[i])
                axes[i][j + 1].imshow(maps[i][j], cmap="jet", alpha=0.45, vmin=0, vmax=1)
        for j, lab in enumerate(["input"] + list(col_labels)):
            axes[0][j].set_title(lab)
        for ax in np.ravel(axes):
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)
