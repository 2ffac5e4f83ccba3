"""Figures written next to the delimited output (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_accuracy(metrics: Sequence, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([m.epoch for m in metrics], [100 * m.accuracy for m in metrics], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 101)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_flags(metrics: Sequence, path: str | Path, byzantine: int = 0) -> Path:
    epochs = [m.epoch for m in metrics]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(epochs, [len(m.flagged_correctness) for m in metrics], label="correctness")
    ax.bar(epochs, [len(m.flagged_robustness) for m in metrics],
           bottom=[len(m.flagged_correctness) for m in metrics], label="robustness")
    if byzantine:
        ax.axhline(byzantine, color="k", ls="--", lw=1, label="byzantine clients")
    ax.set_xlabel("epoch")
    ax.set_ylabel("flagged clients")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_detection(curve: Sequence[tuple[int, float]], q: int, delta: float, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([c[0] for c in curve], [c[1] for c in curve], marker=".")
    ax.axhline(1 - delta, color="k", ls="--", lw=1, label=f"1 - delta = {1 - delta:g}")
    ax.axvline(q, color="r", ls=":", lw=1, label=f"q = {q}")
    ax.set_xlabel("number of checks q")
    ax.set_ylabel("detection probability")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
