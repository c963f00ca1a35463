"""Matplotlib figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata so repeated runs write identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(log_path, out_path) -> Path:
    """Supervised terms, TV and the critic loss against the step index."""
    with open(log_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    step = np.array([int(r["step"]) for r in rows])
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
        for key, label in (("l1", "stage-1 L2"), ("l3", "stage-2 L2"), ("tv", "TV")):
            a.semilogy(step, [max(float(r[key]), 1e-12) for r in rows], label=label)
        a.set_xlabel("step")
        a.set_ylabel("loss")
        a.legend(frameon=False)
        for key, label in (("l2_g", "G adv (stage 1)"), ("l4_g", "G adv (stage 2)"), ("d_loss", "critic")):
            b.plot(step, [float(r[key]) for r in rows], label=label)
        b.set_xlabel("step")
        b.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, out_path)


def plot_metric_distribution(report, out_path) -> Path:
    """Histograms of per-image CC and NSS with the dataset means marked."""
    summary = report.summary()
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, key, values in ((axes[0], "cc", report.cc), (axes[1], "nss", report.nss)):
            v = [x for x in values if x is not None]
            if v:
                ax.hist(v, bins=min(20, max(5, len(v))), color="0.55")
                ax.axvline(summary[f"{key}_mean"], color="C3", lw=1.2, label=f"mean {summary[f'{key}_mean']:.3f}")
                ax.legend(frameon=False)
            ax.set_xlabel(key.upper())
            ax.set_ylabel("images")
        fig.tight_layout()
        return _save(fig, out_path)


def plot_predictions(rows, out_path) -> Path:
    """Grid of (image, coarse, fine, ground truth) rows."""
    n = len(rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 4, figsize=(8, 2 * n), squeeze=False)
        for i, (image, coarse, fine, truth) in enumerate(rows):
            panels = (image.transpose(1, 2, 0), coarse, fine, truth)
            for j, (ax, p) in enumerate(zip(axes[i], panels)):
                ax.imshow(np.clip(p, 0, 1), cmap=None if j == 0 else "gray", vmin=0, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
        for ax, title in zip(axes[0], ("image", "coarse", "fine", "ground truth")):
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, out_path)
