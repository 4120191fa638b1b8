"""Matplotlib figure rendering for the CLI report paths.

Figures are written straight to PNG files (Agg backend, no display) and
carry no timestamps or environment-dependent metadata, so repeated runs
produce identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_coefficient_grid",
    "save_replication_bars",
    "save_marginal_correlations",
    "save_epoch_trace",
]

_PNG_META = {"Software": None}  # strip the version string for stable bytes


def _save(fig, path) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)


def save_coefficient_grid(matrices, titles, path, symmetric: bool = True) -> None:
    """One row of image panels on a shared (optionally symmetric) color scale."""
    matrices = [np.asarray(m) for m in matrices]
    vmax = max(float(np.abs(m).max()) for m in matrices) or 1.0
    if symmetric:
        vmin, cmap = -vmax, "RdBu_r"
    else:
        vmin = min(float(m.min()) for m in matrices)
        cmap = "viridis"
    n = len(matrices)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, m, title in zip(axes[0], matrices, titles):
        im = ax.imshow(m, vmin=vmin, vmax=vmax, cmap=cmap, interpolation="nearest")
        ax.set_title(title, fontsize=10)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0].tolist(), fraction=0.025)
    _save(fig, path)


def save_replication_bars(summary, methods, source_ids, metric, path) -> None:
    """Grouped bars of a metric's replication mean with sd whiskers.

    `summary` maps method -> (mean (T,), sd (T,)); missing methods are
    skipped.
    """
    present = [m for m in methods if m in summary]
    if not present:
        return
    t = len(source_ids)
    width = 0.8 / len(present)
    x = np.arange(t)
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * t, 3.4))
    for i, method in enumerate(present):
        mean, sd = summary[method]
        ax.bar(x + i * width, mean, width, yerr=sd, capsize=3, label=method)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(source_ids, fontsize=9)
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    _save(fig, path)


def save_marginal_correlations(corr, path) -> None:
    """Covariate correlations as bars beside the pixel-correlation heatmap."""
    fig, (ax_cov, ax_pix) = plt.subplots(
        1, 2, figsize=(8, 3.4), gridspec_kw={"width_ratios": [1, 1.4]}
    )
    d = corr.covariate.shape[0]
    ax_cov.bar(np.arange(d), corr.covariate)
    ax_cov.axhline(0.0, color="k", linewidth=0.6)
    ax_cov.set_xlabel("covariate")
    ax_cov.set_ylabel("correlation with response")
    vmax = float(np.abs(corr.pixel).max()) or 1.0
    im = ax_pix.imshow(corr.pixel, vmin=-vmax, vmax=vmax, cmap="RdBu_r",
                       interpolation="nearest")
    ax_pix.set_xticks([])
    ax_pix.set_yticks([])
    ax_pix.set_title("per-pixel correlation", fontsize=10)
    fig.colorbar(im, ax=ax_pix, fraction=0.046)
    _save(fig, path)


def save_epoch_trace(epoch_log, path) -> None:
    """Training and validation loss curves from a fit report's epoch log."""
    epoch_log = np.asarray(epoch_log)
    epochs = np.arange(1, epoch_log.shape[0] + 1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, epoch_log[:, 0], label="train total")
    ax.plot(epochs, epoch_log[:, 1], label="train data")
    ax.plot(epochs, epoch_log[:, 2], label="validation data")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    _save(fig, path)
