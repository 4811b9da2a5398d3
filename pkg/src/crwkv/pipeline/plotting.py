"""Figures for bench sweeps and training runs, rendered to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchRecord  # noqa: E402


def plot_scaling(records: list[BenchRecord], path) -> Path:
    """Log-log ops, wall time and peak bytes against size, with a linear reference slope."""
    done = [r for r in records if not r.truncated]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    if done:
        is_model = done[0].name.startswith("changerwkv")
        x = [r.size ** 2 if is_model else r.size for r in done]
        xlabel = "pixels (H x W)" if is_model else "sequence length T"
        for ax, field, label in zip(axes, ("ops", "wall_ns", "peak_bytes"),
                                    ("counted ops", "median wall time (ns)", "peak tensor bytes")):
            y = [getattr(r, field) for r in done]
            ax.loglog(x, y, "o-", label=done[0].name)
            ax.loglog(x, [y[0] * xi / x[0] for xi in x], "k--", lw=0.8, label="linear")
            ax.set_xlabel(xlabel)
            ax.set_ylabel(label)
            ax.grid(True, which="both", alpha=0.3)
        axes[0].legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_training(history: list[dict], losses: list[float], path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
    ax1.plot(range(1, len(losses) + 1), losses, lw=0.6, alpha=0.6, label="step")
    if history:
        ax1.plot([h["step"] for h in history], [h["train_loss"] for h in history], "o-", label="epoch mean")
        ax2.plot([h["epoch"] for h in history], [h["val_iou"] for h in history], "o-", label="IoU")
        ax2.plot([h["epoch"] for h in history], [h["val_f1"] for h in history], "s-", label="F1")
    ax1.set_xlabel("step")
    ax1.set_ylabel("BCE + Dice")
    ax1.legend()
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("held-out score")
    ax2.set_ylim(0, 1)
    ax2.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
