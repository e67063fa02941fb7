"""Static plot emission. Every plot is written to a file; nothing opens a
window (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import hpd_band

PLOT_KINDS = ("mean-map", "variance-map", "error-map", "hpd-slices",
              "toy-scatter", "loss-trace")


def _save(fig, path):
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def plot_mean_map(summary, path, title="posterior mean"):
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(summary.mean, cmap="magma")
    ax.set_title(title)
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_variance_map(summary, path, subtract_background=False):
    var = summary.variance - (summary.beta if subtract_background else 0.0)
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(np.clip(var, 0, None), cmap="viridis")
    ax.set_title("posterior variance" + (" (no background)" if subtract_background else ""))
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_error_map(reconstruction, truth, path):
    err = np.asarray(reconstruction) - np.asarray(truth)
    lim = np.abs(err).max() or 1.0
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(err, cmap="coolwarm", vmin=-lim, vmax=lim)
    ax.set_title("signed error")
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_hpd_slices(summary, path, slice_indices=(10, 100), level=0.95,
                    variant="full-variance", truth=None):
    """Mean with credible band along horizontal slices (one panel each)."""
    usable = [s for s in slice_indices if 0 <= s < summary.mean.shape[0]]
    if not usable:
        raise ValueError(f"no slice of {slice_indices} fits image height "
                         f"{summary.mean.shape[0]}")
    fig, axes = plt.subplots(len(usable), 1, figsize=(6, 2.6 * len(usable)),
                             squeeze=False)
    for ax, s in zip(axes[:, 0], usable):
        band = hpd_band(summary, s, level=level, variant=variant)
        cols = np.arange(band.mean.size)
        ax.fill_between(cols, band.lower, band.upper, alpha=0.3,
                        label=f"{level:.2f} HPD")
        ax.plot(cols, band.mean, lw=1.2, label="mean")
        if truth is not None:
            ax.plot(cols, np.asarray(truth)[s], lw=1.0, ls="--", label="truth")
        ax.set_title(f"slice {s} ({variant})")
        ax.legend(fontsize=7)
    _save(fig, path)


def plot_toy_scatter(truth_points, model_points, path):
    fig, axes = plt.subplots(1, 2, figsize=(8, 4), sharex=True, sharey=True)
    for ax, pts, title in zip(axes, (truth_points, model_points),
                              ("ground truth", "learned sampler")):
        ax.scatter(pts[:, 0], pts[:, 1], s=1, alpha=0.15, linewidths=0)
        ax.set_title(title)
        ax.set_aspect("equal")
    _save(fig, path)


def plot_loss_trace(trace, path):
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(np.arange(len(trace)), trace, lw=0.8)
    ax.set_xlabel("batch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    _save(fig, path)
