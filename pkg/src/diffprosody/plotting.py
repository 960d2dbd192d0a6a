"""Figures written next to the CSV/JSON outputs.  Headless (Agg) only."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def bin_proportions(gt_hist, gen_hist, significant, path, title: str = "") -> None:
    """Side-by-side bin proportions; bins flagged by the z-test are starred."""
    gt = np.asarray(gt_hist)
    gen = np.asarray(gen_hist)
    idx = np.arange(len(gt))
    fig, ax = plt.subplots(figsize=(8, 3.2))
    ax.bar(idx - 0.2, gt, width=0.4, label="ground truth", color="#4c72b0")
    ax.bar(idx + 0.2, gen, width=0.4, label="generated", color="#dd8452")
    top = max(gt.max(), gen.max())
    for i, flag in enumerate(significant):
        if flag:
            ax.text(i, top * 1.03, "*", ha="center")
    ax.set_xticks(idx)
    ax.set_xlabel("bin")
    ax.set_ylabel("proportion")
    ax.set_ylim(0, top * 1.12 + 1e-9)
    ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def projection_scatter(gt, gen, centroids, path, title: str = "") -> None:
    """Both populations projected on the top two principal axes of the ground truth."""
    gt = np.asarray(gt, dtype=np.float64).reshape(len(gt), -1)
    gen = np.asarray(gen, dtype=np.float64).reshape(len(gen), -1)
    mu = gt.mean(0)
    _, _, vt = np.linalg.svd(gt - mu, full_matrices=False)
    axes = vt[:2].T
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    for arr, colour, label in ((gt, "#4c72b0", "ground truth"), (gen, "#dd8452", "generated")):
        xy = (arr - mu) @ axes
        ax.scatter(xy[:, 0], xy[:, 1], s=4, alpha=0.35, color=colour, label=label)
    c = (np.asarray(centroids) - mu) @ axes
    ax.scatter(c[:, 0], c[:, 1], marker="x", color="black", s=25, label="bin centres")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(title)
    ax.legend(frameon=False, markerscale=3, fontsize=8)
    _save(fig, path)


def loss_curve(trace, path, title: str = "", window: int = 50) -> None:
    y = np.asarray(trace, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(y, color="#bbbbbb", lw=0.6)
    if len(y) >= window:
        ax.plot(np.arange(window - 1, len(y)), np.convolve(y, np.ones(window) / window, "valid"),
                color="#4c72b0")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    _save(fig, path)


def metric_bars(labels, jsd, ndb, path, title: str = "") -> None:
    """JSD and NDB per labelled run, e.g. one bar per ablation."""
    idx = np.arange(len(labels))
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.bar(idx, jsd, color="#4c72b0")
    a.set_ylabel("JSD")
    b.bar(idx, ndb, color="#dd8452")
    b.set_ylabel("NDB")
    for ax in (a, b):
        ax.set_xticks(idx)
        ax.set_xticklabels(labels, rotation=20, fontsize=8)
    fig.suptitle(title)
    _save(fig, path)
