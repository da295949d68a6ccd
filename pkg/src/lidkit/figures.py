"""Figure rendering for the report paths.

Every plot lands next to the delimited output it visualizes: confusion
heatmaps beside confusion.csv, pair-similarity histograms beside
pair_similarity.csv, loss curves beside train_log.csv.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def confusion_heatmap(confusion, class_names, path, title="Confusion matrix"):
    c = np.asarray(confusion, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(0.6 * len(class_names) + 2.2, 0.6 * len(class_names) + 1.8))
    im = ax.imshow(c, cmap="Blues")
    _label_axes(ax, class_names)
    _annotate(ax, c, fmt="{:.0f}", threshold=c.max() * 0.5 if c.max() > 0 else 1.0)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def confusion_diff_heatmap(diff, class_names, path, title="Confusion difference"):
    d = np.asarray(diff, dtype=np.float64)
    lim = max(np.abs(d).max(), 1e-6)
    fig, ax = plt.subplots(figsize=(0.6 * len(class_names) + 2.2, 0.6 * len(class_names) + 1.8))
    im = ax.imshow(d, cmap="RdBu", vmin=-lim, vmax=lim)
    _label_axes(ax, class_names)
    _annotate(ax, d, fmt="{:+.2f}", threshold=lim * 0.6)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def pair_histogram_figure(hist, path, title="Cosine similarity of pairs"):
    centers = (hist.bin_edges[:-1] + hist.bin_edges[1:]) / 2
    width = hist.bin_edges[1] - hist.bin_edges[0]
    fig, ax = plt.subplots(figsize=(7, 4))
    if hist.n_pos:
        ax.bar(centers, hist.pos_counts, width=width, alpha=0.6, label=f"positive pairs (n={hist.n_pos})")
    if hist.n_neg:
        ax.bar(centers, hist.neg_counts, width=width, alpha=0.6, label=f"negative pairs (n={hist.n_neg})")
    if hist.mean_gap is not None:
        ax.set_title(f"{title} (mean gap {hist.mean_gap:.3f})")
    else:
        ax.set_title(title)
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("pair count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def training_curves(records, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    steps = np.arange(len(records))
    for key in ("total", "l_indomain", "l_langid", "l_instance", "l_class"):
        ax1.plot(steps, [r[key] for r in records], label=key, linewidth=1)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_title("Loss components")
    ax1.legend(fontsize=8)
    ax2.plot(steps, [r["lr"] for r in records], color="tab:green", linewidth=1)
    ax2.set_xlabel("step")
    ax2.set_ylabel("learning rate")
    ax2.set_title("Schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _label_axes(ax, class_names):
    ax.set_xticks(range(len(class_names)))
    ax.set_yticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=45, ha="right")
    ax.set_yticklabels(class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")


def _annotate(ax, values, fmt, threshold):
    if values.shape[0] > 20:
        return
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            color = "white" if abs(values[i, j]) > threshold else "black"
            ax.text(j, i, fmt.format(values[i, j]), ha="center", va="center", fontsize=7, color=color)
