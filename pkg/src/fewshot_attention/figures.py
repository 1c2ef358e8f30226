"""Matplotlib figure rendering for the CLI report paths.

Every figure lands next to its delimited output file; the Agg backend keeps
this usable on headless machines.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.figsize": (6.0, 3.8),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 130,
    "savefig.bbox": "tight",
})


def _running_mean(values, window=50):
    v = np.asarray(values, dtype=np.float64)
    if v.size <= window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def save_loss_curve(rows, path):
    """Loss-log rows (episode, l_att, l_ce, total) -> training curve figure."""
    rows = list(rows)
    episodes = [r[0] for r in rows]
    fig, ax = plt.subplots()
    for idx, label in ((1, "attention"), (2, "classification"), (3, "total")):
        series = np.asarray([r[idx] for r in rows], dtype=np.float64)
        if np.isnan(series).all():
            continue
        sm = _running_mean(series)
        ax.plot(episodes[len(episodes) - len(sm):], sm, label=label)
    ax.set_xlabel("episode")
    ax.set_ylabel("loss (running mean)")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)


def save_accuracy_histogram(accuracies, mean, ci95, path):
    fig, ax = plt.subplots()
    ax.hist(accuracies, bins=20, range=(0.0, 1.0), color="#4878b0", edgecolor="white")
    ax.axvline(mean, color="#d1605e", label=f"mean {mean:.4f} ± {ci95:.4f}")
    ax.set_xlabel("episode accuracy")
    ax.set_ylabel("episodes")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)


def save_ablation_bars(rows, path):
    """Rows of (label, mean, ci95) -> grouped bar chart with error bars."""
    rows = list(rows)
    labels = [r[0] for r in rows]
    means = [r[1] for r in rows]
    errs = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(rows)), 3.8))
    xs = np.arange(len(rows))
    ax.bar(xs, means, yerr=errs, capsize=3, color="#4878b0")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    fig.savefig(path)
    plt.close(fig)


def save_attention_overlay(query_gray, heatmap, path):
    """Render the query in grayscale with the attention map blended on top."""
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(query_gray, cmap="gray", vmin=0.0, vmax=1.0)
    ax.imshow(heatmap, cmap="inferno", alpha=0.45, vmin=0.0, vmax=1.0)
    ax.set_axis_off()
    ax.grid(False)
    fig.savefig(path)
    plt.close(fig)
