"""Report-path figure rendering. Every plot lands next to the delimited data
it is drawn from; the CSV stays the source of truth."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def loss_curve(times, losses, path, label="train"):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(times, losses, lw=1.5, label=label)
    ax.set_xlabel("time")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def curve_overlay(times, curves: dict, path, ylabel="loss", logy=True):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for label, ys in curves.items():
        ax.plot(times[: len(ys)], ys, lw=1.3, label=label)
    ax.set_xlabel("time")
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, Path(path))


def loglog_fit(sizes, values, slope, intercept, path, ylabel="across-seed std"):
    fig, ax = plt.subplots(figsize=(4.4, 3.4))
    ax.loglog(sizes, values, "o", ms=5)
    xs = np.asarray(sizes, dtype=float)
    ax.loglog(xs, np.exp(intercept) * xs ** slope, "--", lw=1,
              label=f"slope {slope:.2f}")
    ax.set_xlabel("size factor")
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def kernel_heatmap(values, path, title=""):
    """Equal-time slice or any 2-D kernel section."""
    fig, ax = plt.subplots(figsize=(4, 3.4))
    im = ax.imshow(values, origin="lower", aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, Path(path))


def convergence(history, path):
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    ax.semilogy(np.arange(1, len(history) + 1), history, "o-", ms=4)
    ax.set_xlabel("fixed-point iteration")
    ax.set_ylabel("max kernel change")
    return _save(fig, Path(path))
