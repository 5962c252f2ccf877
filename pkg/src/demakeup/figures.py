"""Matplotlib renderings written next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import training
from .evaluation import ScoredPairSet


def save_loss_curves(log_path, out_path) -> None:
    """Plot every loss-log column against the step index."""
    entries = training.read_loss_log(log_path)
    if not entries:
        raise ValueError(f"loss log {log_path} is empty")
    steps = [step for step, _ in entries]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for i, name in enumerate(("adv_d", "adv_g", "id", "rec", "reg", "sat", "total")):
        ax.plot(steps, [b.as_tuple()[i] for _, b in entries], label=name, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(ncol=4, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _roc_points(pair_set: ScoredPairSet):
    thresholds = np.unique(
        np.concatenate([pair_set.genuine_scores, pair_set.impostor_scores])
    )
    fpr = [(pair_set.impostor_scores > t).mean() for t in thresholds]
    tpr = [(pair_set.genuine_scores > t).mean() for t in thresholds]
    return np.array(fpr), np.array(tpr)


def save_roc_figure(generated: ScoredPairSet, baseline: ScoredPairSet, out_path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for pair_set, label, style in ((generated, "generated", "-"), (baseline, "baseline", "--")):
        fpr, tpr = _roc_points(pair_set)
        order = np.argsort(fpr)
        ax.plot(fpr[order], tpr[order], style, label=label, lw=1.2)
    for target in (0.001, 0.01):
        ax.axvline(target, color="gray", lw=0.6, alpha=0.6)
    ax.set_xscale("log")
    ax.set_xlim(1e-4, 1.0)
    ax.set_xlabel("impostor FPR")
    ax.set_ylabel("genuine TPR")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_score_histograms(generated: ScoredPairSet, baseline: ScoredPairSet, out_path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8), sharey=True)
    for ax, pair_set, title in ((axes[0], baseline, "baseline"), (axes[1], generated, "generated")):
        bins = np.linspace(-1.0, 1.0, 60)
        ax.hist(pair_set.impostor_scores, bins=bins, alpha=0.6, label="impostor", density=True)
        ax.hist(pair_set.genuine_scores, bins=bins, alpha=0.6, label="genuine", density=True)
        ax.set_title(title)
        ax.set_xlabel("cosine similarity")
        ax.legend(fontsize=8)
    axes[0].set_ylabel("density")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
