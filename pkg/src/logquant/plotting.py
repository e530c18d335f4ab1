"""Figures written next to the CLI reports.  Uses the non-interactive Agg backend."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "logquant",
}


def new_figure(width: float = 6.0, height: float | None = None, nrows: int = 1, ncols: int = 1):
    if height is None:
        height = width * (math.sqrt(5) - 1.0) / 2.0
    with plt.rc_context(STYLE):
        return plt.subplots(nrows=nrows, ncols=ncols, figsize=(width, height))


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_trace(records: list[dict], path, baseline: float | None = None) -> Path:
    fig, ax = new_figure()
    steps = [r["step"] for r in records]
    ax.plot(steps, [r["loss"] for r in records], lw=0.8, label="batch loss")
    if baseline is not None:
        ax.axhline(baseline, color="k", ls="--", lw=0.8, label="quantized, no retraining")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("MSE")
    ax.legend()
    return save(fig, path)


def plot_sse_comparison(totals: dict[str, float | None], path) -> Path:
    names = [k for k, v in totals.items() if v is not None]
    fig, ax = new_figure()
    ax.bar(names, [totals[k] for k in names], color="0.4")
    ax.set_ylabel("total squared error")
    ax.set_yscale("log")
    return save(fig, path)


def plot_ratios(per_tensor: list[dict], path) -> Path:
    fig, ax = new_figure(width=max(6.0, 0.4 * len(per_tensor)))
    ax.bar(range(len(per_tensor)), [r["ratio"] for r in per_tensor], color="0.4")
    ax.set_xticks(range(len(per_tensor)))
    ax.set_xticklabels([r["name"] for r in per_tensor], rotation=60, ha="right")
    ax.set_ylabel("compression ratio")
    return save(fig, path)


def plot_value_histograms(groups: dict[str, np.ndarray], path, bins: int = 80) -> Path:
    fig, ax = new_figure()
    for label, values in groups.items():
        if len(values):
            ax.hist(values, bins=bins, histtype="step", density=True, label=f"{label} (n={len(values)})")
    ax.set_xlabel("value")
    ax.set_ylabel("density")
    ax.legend()
    return save(fig, path)
