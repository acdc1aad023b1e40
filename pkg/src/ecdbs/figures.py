"""Matplotlib renders saved next to the CSV reports.

Every function writes one PNG and returns its path.  The Agg backend is
forced so reports render identically on headless machines.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_band_report(entropy, cluster_labels, selected, path):
    """Per-band entropy bars colored by cluster, selected bands marked."""
    entropy = np.asarray(entropy, dtype=float)
    cluster_labels = np.asarray(cluster_labels)
    bands = np.arange(entropy.size)
    fig, ax = plt.subplots(figsize=(9, 3.2))
    cmap = plt.get_cmap("tab20")
    colors = [cmap(int(c) % 20) for c in cluster_labels]
    ax.bar(bands, entropy, color=colors, width=0.9)
    if selected:
        sel = sorted(selected)
        ax.plot(sel, entropy[sel], "kv", markersize=6, label="selected band")
        ax.legend(loc="upper right", frameon=False)
    ax.set_xlabel("band index")
    ax.set_ylabel("entropy (nats)")
    ax.set_title("band entropy and cluster layout")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_weight_trajectory(epochs, weights, path):
    """Band importance weights across epochs as an epoch x band heat map."""
    weights = np.asarray(weights, dtype=float)
    fig, ax = plt.subplots(figsize=(9, 3.6))
    im = ax.imshow(
        weights.T,
        aspect="auto",
        origin="lower",
        interpolation="nearest",
        extent=(min(epochs), max(epochs) + 1, -0.5, weights.shape[1] - 0.5),
        cmap="viridis",
    )
    fig.colorbar(im, ax=ax, label="importance weight")
    ax.set_xlabel("epoch")
    ax.set_ylabel("band index")
    ax.set_title("band importance trajectory")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_training_curves(epochs, losses, val_kappa, taus, path):
    fig, ax1 = plt.subplots(figsize=(7, 3.6))
    ax1.plot(epochs, losses, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, val_kappa, color="tab:orange", label="val kappa")
    ax2.plot(epochs, taus, color="tab:gray", linestyle=":", label="temperature")
    ax2.set_ylabel("val kappa / temperature", color="tab:orange")
    lines = ax1.get_lines() + ax2.get_lines()
    ax1.legend(lines, [ln.get_label() for ln in lines], loc="center right", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_change_maps(prediction, path, reference=None):
    """Predicted change map, with the reference mask alongside when given."""
    panels = [("prediction", prediction)]
    if reference is not None:
        panels.append(("reference", reference))
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, raster) in zip(axes, panels):
        ax.imshow(np.asarray(raster), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
