"""Matplotlib figures written next to report/checkpoint outputs.

Imports stay inside the functions so the prediction path never pays the
matplotlib startup cost.
"""

from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def save_score_histogram(report, path) -> None:
    """Per-class score distributions of an evaluation run."""
    plt = _pyplot()
    scores = np.array([r.score for r in report.records])
    labels = np.array([r.label for r in report.records])
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, 1.0, 41)
    ax.hist(scores[labels == 0], bins=bins, alpha=0.6, label="normal", color="tab:blue")
    ax.hist(scores[labels == 1], bins=bins, alpha=0.6, label="abnormal", color="tab:red")
    ax.axvline(report.threshold, color="k", linestyle="--", linewidth=1,
               label=f"threshold {report.threshold:g}")
    ax.set_xlabel("predicted abnormality probability")
    ax.set_ylabel("bags")
    ax.set_title(f"AUC {report.auc:.4f}  F1 {report.f1:.4f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(history: list[dict], path) -> None:
    """Loss and validation AUC per epoch."""
    plt = _pyplot()
    epochs = [h["epoch"] for h in history]
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [h["train_loss"] for h in history], marker="o", markersize=3)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_auc.plot(epochs, [h["val_auc"] for h in history], marker="o", markersize=3,
                color="tab:green")
    ax_auc.set_xlabel("epoch")
    ax_auc.set_ylabel("validation AUC")
    ax_auc.set_ylim(0.0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
