"""Report figures.  Every function renders straight to a file and returns
the path, so the CLI can drop images next to its delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curves(steps, losses, val_steps, val_ed, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, losses, lw=0.8)
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.set_ylabel("training loss")
    if len(val_steps):
        ax2.plot(val_steps, val_ed, marker="o")
    ax2.set_xlabel("step")
    ax2.set_ylabel("validation anchor error (mm)")
    fig.tight_layout()
    return _finish(fig, path)


def plot_attention(att, stack_idx, path):
    """Head-averaged slice-to-slice attention with stack boundaries marked."""
    att = np.asarray(att)
    fig, ax = plt.subplots(figsize=(4.2, 4))
    im = ax.imshow(att, cmap="viridis")
    bounds = np.flatnonzero(np.diff(np.asarray(stack_idx))) + 0.5
    for b in bounds:
        ax.axhline(b, color="w", lw=0.6)
        ax.axvline(b, color="w", lw=0.6)
    ax.set_xlabel("key slice")
    ax.set_ylabel("query slice")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, path)


def plot_volume_comparison(volumes: dict, path):
    """Central orthogonal cuts of each named volume, one row per volume."""
    names = list(volumes)
    fig, axes = plt.subplots(len(names), 3, figsize=(7.5, 2.5 * len(names)),
                             squeeze=False)
    vmax = max(float(np.max(v)) for v in volumes.values()) or 1.0
    for r, name in enumerate(names):
        v = np.asarray(volumes[name])
        cuts = [v[v.shape[0] // 2], v[:, v.shape[1] // 2], v[:, :, v.shape[2] // 2]]
        for c, cut in enumerate(cuts):
            axes[r][c].imshow(cut, cmap="gray", vmin=0.0, vmax=vmax)
            axes[r][c].set_xticks([])
            axes[r][c].set_yticks([])
        axes[r][0].set_ylabel(name, fontsize=9)
    fig.tight_layout()
    return _finish(fig, path)


def plot_distance_profile(rows, path):
    """Median anchor error binned by the slice's offset from the volume center."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if rows:
        x = [r["bin_center_mm"] for r in rows]
        med = [r["median_ed_mm"] for r in rows]
        lo = [r["p25_ed_mm"] for r in rows]
        hi = [r["p75_ed_mm"] for r in rows]
        ax.plot(x, med, marker="o")
        ax.fill_between(x, lo, hi, alpha=0.25)
    ax.set_xlabel("distance from center (mm)")
    ax.set_ylabel("anchor error (mm)")
    fig.tight_layout()
    return _finish(fig, path)


def plot_metric_vs_count(counts, values, ylabel, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(counts, values, marker="s")
    ax.set_xlabel("number of stacks")
    ax.set_ylabel(ylabel)
    ax.set_xticks(list(counts))
    fig.tight_layout()
    return _finish(fig, path)
