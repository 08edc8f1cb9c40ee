"""Static figures written next to the CSV outputs (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_stage_auc(plot_data: dict, path) -> Path:
    """Mean AUC per stage for each method, with individual runs as faint lines."""
    stages = plot_data["stages"]
    x = np.arange(len(stages))
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for method, color in (("baseline", "tab:gray"), ("csdm", "tab:blue")):
        for series in plot_data["runs"].get(method, {}).values():
            ax.plot(x, series, color=color, alpha=0.25, lw=1)
        mean = plot_data["mean"].get(method)
        if mean:
            ax.plot(x, mean, color=color, marker="o", lw=2, label=method)
    ax.set_xticks(x, stages)
    ax.set_ylabel("test AUC")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_timings(labels: Sequence[str], seconds: Sequence[float], path) -> Path:
    """Horizontal bars of mean seconds per batch."""
    fig, ax = plt.subplots(figsize=(5, 0.5 * len(labels) + 1.2))
    y = np.arange(len(labels))
    ax.barh(y, np.asarray(seconds) * 1e3, color="tab:blue")
    ax.set_yticks(y, labels)
    ax.set_xlabel("ms per batch")
    ax.invert_yaxis()
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curves(curves: np.ndarray, path) -> Path:
    """Training curves of ``(L, L_ctr, L_diff)`` against step."""
    curves = np.asarray(curves).reshape(-1, 3)
    fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
    for ax, col, name in zip(axes, curves.T, ("L", "L_ctr", "L_diff")):
        ax.plot(col, lw=1)
        ax.set_title(name)
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(p, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return p
