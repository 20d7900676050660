"""Figures written next to CLI reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import bev_histogram  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def figsize(width=6.0, height=None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    return width, height or width * golden


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_loss_history(history, path, title="Training loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        epochs = [h["epoch"] for h in history]
        for key, label in (("total", "total"), ("diff", "noise L2"),
                           ("mean", "mean reg."), ("std", "std reg.")):
            ax.plot(epochs, [h[key] for h in history], marker="o", ms=3, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend()
        _save(fig, path)


def plot_noise_stats(stats: dict, path):
    """Mean and std of the predicted noise over denoising steps, one line per run.

    ``stats`` maps a label to a list of ``(step, mean, std)`` tuples.
    """
    with plt.rc_context(STYLE):
        fig, (ax_m, ax_s) = plt.subplots(1, 2, figsize=figsize(8.0, 3.2))
        for label, rows in stats.items():
            rows = np.asarray(rows, dtype=np.float64)
            idx = np.arange(1, len(rows) + 1)
            ax_m.plot(idx, rows[:, 1], marker=".", label=label)
            ax_s.plot(idx, rows[:, 2], marker=".", label=label)
        ax_m.axhline(0.0, color="k", lw=0.8, ls="--")
        ax_s.axhline(1.0, color="k", lw=0.8, ls="--")
        ax_m.set_ylabel("mean of predicted noise")
        ax_s.set_ylabel("std of predicted noise")
        for ax in (ax_m, ax_s):
            ax.set_xlabel("denoising step")
        ax_s.legend()
        _save(fig, path)


def plot_bev(pred, gt, resolution, path):
    """Side-by-side bird's-eye occupancy histograms of prediction and ground truth."""
    hp = bev_histogram(pred, resolution)
    hg = bev_histogram(gt, resolution)
    cols = np.array(sorted(set(hp) | set(hg)))
    lo = cols.min(axis=0)
    shape = tuple(cols.max(axis=0) - lo + 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=figsize(8.0, 4.0))
        for ax, hist, title in ((axes[0], hp, "prediction"), (axes[1], hg, "ground truth")):
            img = np.zeros(shape)
            for (x, y), n in hist.items():
                img[x - lo[0], y - lo[1]] = n
            ax.imshow(img.T, origin="lower", cmap="viridis",
                      extent=(lo[0] * resolution, (lo[0] + shape[0]) * resolution,
                              lo[1] * resolution, (lo[1] + shape[1]) * resolution))
            ax.set_title(f"{title} ({resolution:g} m cells)")
            ax.set_xlabel("x [m]")
            ax.set_ylabel("y [m]")
            ax.grid(False)
        _save(fig, path)


def plot_sweep(param, values, cds, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(5.0))
        ax.plot(values, cds, marker="o")
        ax.set_xlabel(param)
        ax.set_ylabel("CD [m]")
        ax.set_title(f"Mean chamfer distance vs {param}")
        _save(fig, path)
