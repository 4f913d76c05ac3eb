"""Figure rendering for the CLI report paths.

Every report CSV the CLI writes gets a companion PNG so runs can be audited
at a glance. Figures use the Agg backend and carry no volatile metadata, so
re-rendering the same data reproduces the same file.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_training_curves",
    "save_scale_histogram",
    "save_channel_table",
    "save_bench_chart",
    "save_ablation_chart",
]

_SAVE_KW = dict(dpi=120, metadata={"Software": None})


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_training_curves(metrics, path) -> None:
    """Loss and accuracy per epoch from a trainer metrics list."""
    epochs = [m.epoch for m in metrics]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3))
    ax_loss.plot(epochs, [m.task_loss for m in metrics], label="task loss")
    ax_loss.plot(epochs, [m.total_loss for m in metrics], label="total loss", linestyle="--")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [m.accuracy for m in metrics], color="tab:green")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("train accuracy")
    ax_acc.set_ylim(0, 1.05)
    _finish(fig, path)


def save_scale_histogram(model, path, bins: int = 40) -> None:
    """Distribution of |scale| over all BN channels."""
    values = np.concatenate([np.abs(bn.scale) for _, bn in model.bn_layers()])
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(values, bins=bins, color="tab:blue", edgecolor="black", linewidth=0.3)
    ax.set_xlabel("|BN scale|")
    ax.set_ylabel("channels")
    _finish(fig, path)


def save_channel_table(channel_table, path) -> None:
    """Per-layer channel counts before and after surgery."""
    layers = [str(row[0]) for row in channel_table]
    before = [row[1] for row in channel_table]
    after = [row[2] for row in channel_table]
    x = np.arange(len(layers))
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(layers) + 2), 3))
    ax.bar(x - 0.2, before, width=0.4, label="before")
    ax.bar(x + 0.2, after, width=0.4, label="after")
    ax.set_xticks(x, [f"bn@{l}" for l in layers])
    ax.set_ylabel("channels")
    ax.legend()
    _finish(fig, path)


def save_bench_chart(rows, path) -> None:
    """Volume and latency bars, one group per benched model.

    rows are dicts with keys model, model_volume_bytes, mean_latency_s.
    """
    names = [r["model"] for r in rows]
    volumes = [r["model_volume_bytes"] / 1024.0 for r in rows]
    latencies = [1e3 * r["mean_latency_s"] for r in rows]
    x = np.arange(len(names))
    fig, (ax_vol, ax_lat) = plt.subplots(1, 2, figsize=(9, 3))
    ax_vol.bar(x, volumes, color="tab:blue")
    ax_vol.set_xticks(x, names, rotation=30, ha="right")
    ax_vol.set_ylabel("model volume (KiB)")
    ax_lat.bar(x, latencies, color="tab:orange")
    ax_lat.set_xticks(x, names, rotation=30, ha="right")
    ax_lat.set_ylabel("latency per image (ms)")
    _finish(fig, path)


def save_ablation_chart(rows, path) -> None:
    """Metric delta per pre-processing approach.

    rows are dicts with keys approach and delta (percentage points).
    """
    body = [r for r in rows if r["approach"] != "baseline"]
    names = [r["approach"] for r in body]
    deltas = [r["delta"] for r in body]
    colors = ["tab:green" if d >= 0 else "tab:red" for d in deltas]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(len(names)), deltas, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(np.arange(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel("metric delta (points)")
    _finish(fig, path)
