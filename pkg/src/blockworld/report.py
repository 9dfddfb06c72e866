"""Matplotlib figures for fit and eval reports (written to files, never shown)."""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_TERMS = ("mse", "tv", "parsi", "over", "total")


def smooth(values: Sequence[float], window: int = 100) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what is available."""
    v = np.asarray(values, float)
    if len(v) == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_loss_curves(metrics: List[dict], path, window: int = 100, title: str = "") -> Path:
    it = np.array([m["iter"] for m in metrics])
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    for k in LOSS_TERMS:
        vals = np.array([m[k] for m in metrics])
        if np.any(vals > 0):
            ax.plot(it, smooth(vals, window), label=k, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.legend(fontsize=8)
    stages = np.array([m["stage"] for m in metrics])
    for b in np.nonzero(np.diff(stages))[0]:
        ax.axvline(it[b + 1], color="k", ls=":", lw=0.8)
    ax2.step(it, [m["n_alive"] for m in metrics], where="post")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("live blocks")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_render_comparison(renders, targets, path, max_views: int = 4) -> Path:
    n = min(len(renders), max_views)
    fig, axes = plt.subplots(2, n, figsize=(2.6 * n, 5.4), squeeze=False)
    for i in range(n):
        for row, img, lab in ((0, renders[i], "render"), (1, targets[i], "target")):
            a = axes[row, i]
            a.imshow(np.clip(np.asarray(img), 0, 1))
            a.set_xticks([])
            a.set_yticks([])
            if i == 0:
                a.set_ylabel(lab)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_run_losses(losses: Sequence[float], best: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    colors = ["C1" if i == best else "C0" for i in range(len(losses))]
    ax.bar(range(len(losses)), losses, color=colors)
    ax.set_xlabel("run")
    ax.set_ylabel("final render loss")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
