"""Report figures written next to the JSON/TSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def loss_curve(history: Sequence[dict], path: str | Path, title: str = "training loss") -> Path:
    steps = [h["step"] for h in history if "loss" in h]
    losses = [h["loss"] for h in history if "loss" in h]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def ablation_bars(summary: Sequence[dict], path: str | Path) -> Path:
    """Mean exact match per (task, variant) with half-range error bars."""
    labels = [f"{s['task']}\n{s['variant']}" for s in summary]
    means = [100 * s["mean"] for s in summary]
    spreads = [100 * s["spread"] for s in summary]
    colors = ["tab:blue" if s["variant"] == "full" else "tab:orange" for s in summary]
    fig, ax = plt.subplots(figsize=(1.6 * len(summary) + 1, 3.5))
    ax.bar(range(len(summary)), means, yerr=spreads, color=colors, capsize=4)
    ax.set_xticks(range(len(summary)), labels, fontsize=8)
    ax.set_ylabel("held-out exact match (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def score_histogram(scores: Sequence[float], metric: str, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(scores, bins=20, range=(0, 1))
    ax.set_xlabel(f"per-example {metric}")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
