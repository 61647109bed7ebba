"""Figure rendering for benchmark sweeps and training logs.

Everything draws through the Agg backend and writes PNG files next to
the delimited output; nothing here opens a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_chunk_sweep_figure(rows: list[dict], path) -> Path:
    """WER against chunk size, one point per sweep setting."""
    rows = sorted(rows, key=lambda r: r["chunk_size_s"])
    xs = [r["chunk_size_s"] for r in rows]
    ys = [100.0 * r["wer"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("chunk size (s)")
    ax.set_ylabel("WER (%)")
    ax.set_title("Accuracy vs. chunk size")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_delay_sweep_figure(rows: list[dict], path) -> Path:
    """RTF and finalize latency against the max-delay bound."""
    rows = sorted(rows, key=lambda r: r["max_delay_s"])
    xs = [r["max_delay_s"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(xs, [r["rtf"] for r in rows], marker="o", color="tab:blue", label="RTF")
    ax.set_xlabel("max delay (s)")
    ax.set_ylabel("RTF", color="tab:blue")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(
        xs,
        [r["avg_finalize_latency_ms"] for r in rows],
        marker="s",
        color="tab:red",
        label="finalize latency",
    )
    ax2.set_ylabel("avg finalize latency (ms)", color="tab:red")
    ax.set_title("Runtime vs. max delay")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_training_figure(history, path) -> Path:
    """Per-epoch train/validation loss, stage boundaries marked."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    xs = range(1, len(history) + 1)
    ax.plot(xs, [h.train_loss for h in history], marker="o", label="train loss")
    ax.plot(xs, [h.val_loss for h in history], marker="s", label="val loss")
    prev_stage = None
    for i, h in enumerate(history, start=1):
        if h.stage != prev_stage:
            ax.axvline(i - 0.5, color="gray", ls=":", alpha=0.5)
            ax.text(i, ax.get_ylim()[1], h.stage, fontsize=7, va="top")
            prev_stage = h.stage
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
