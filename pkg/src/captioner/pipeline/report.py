"""Matplotlib figures written next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from captioner.pipeline.train import TrainLog  # noqa: E402


def plot_losses(log: TrainLog, path) -> Path:
    """Per-epoch training loss, one colour per stage, valid loss dashed if present."""
    fig, ax = plt.subplots(figsize=(7, 4))
    stages = list(dict.fromkeys(r.stage for r in log.rows))
    for stage in stages:
        rows = [r for r in log.rows if r.stage == stage]
        ax.plot([r.global_epoch for r in rows], [r.loss for r in rows], label=stage)
        if any(r.valid is not None for r in rows):
            ax.plot([r.global_epoch for r in rows if r.valid is not None], [r.valid for r in rows if r.valid is not None],
                    linestyle="--", label=f"{stage} (valid)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(metrics: Mapping[str, float], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(metrics)
    ax.bar(names, [metrics[n] for n in names], color="tab:blue")
    for i, n in enumerate(names):
        ax.text(i, metrics[n], f"{metrics[n]:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("score")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
