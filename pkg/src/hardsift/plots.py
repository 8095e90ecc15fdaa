"""Figure rendering for the CLI report paths. Every plot lands next to the
delimited output it visualizes, using the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curves(epoch_rows: list[dict], path: str | Path) -> None:
    """Mean training loss and validation NDCG@10 per epoch."""
    epochs = [row["epoch"] for row in epoch_rows]
    losses = [row["mean_loss"] for row in epoch_rows]
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_loss.plot(epochs, losses, color="tab:blue", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss", color="tab:blue")
    valid = [(row["epoch"], row["valid"]["ndcg"]["10"]) for row in epoch_rows if row.get("valid")]
    if valid:
        ax_metric = ax_loss.twinx()
        ax_metric.plot(*zip(*valid), color="tab:orange", label="valid NDCG@10")
        ax_metric.set_ylabel("valid NDCG@10", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_noise_sweep(rows: list[dict], path: str | Path) -> None:
    """Mean NDCG@10 against the injected noise ratio, one line per method,
    with the per-seed points scattered underneath."""
    methods = sorted({row["method"] for row in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    for method in methods:
        mine = [r for r in rows if r["method"] == method]
        ratios = sorted({r["ratio"] for r in mine})
        means = []
        for ratio in ratios:
            values = [r["ndcg10"] for r in mine if r["ratio"] == ratio]
            means.append(sum(values) / len(values))
            ax.scatter([ratio] * len(values), values, s=12, alpha=0.35)
        ax.plot(ratios, means, marker="o", label=method)
    ax.set_xlabel("injected noise ratio")
    ax.set_ylabel("test NDCG@10")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_pattern_trace(rows: list[dict], path: str | Path) -> None:
    """Loss and prediction-score curves per sample class, two panels."""
    classes = sorted({row["class"] for row in rows})
    fig, (ax_loss, ax_score) = plt.subplots(1, 2, figsize=(10, 4))
    for cls in classes:
        mine = sorted((r for r in rows if r["class"] == cls), key=lambda r: r["epoch"])
        epochs = [r["epoch"] for r in mine]
        ax_loss.plot(epochs, [r["mean_loss"] for r in mine], label=cls)
        ax_score.plot(epochs, [r["mean_score"] for r in mine], label=cls)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss")
    ax_score.set_xlabel("epoch")
    ax_score.set_ylabel("mean prediction score")
    ax_loss.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
