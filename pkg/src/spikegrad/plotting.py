"""Figures for run reports (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_COLORS = {"FF": "#9e9e9e", "RC": "#1f77b4", "RD": "#ff7f0e"}


def plot_ablation(rows, path: str, title: str = ""):
    """Grouped bars of mean test error (with SEM whiskers) per readout and mode."""
    readouts = list(dict.fromkeys(r.readout for r in rows))
    modes = list(dict.fromkeys(r.mode for r in rows))
    width = 0.8 / max(len(modes), 1)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(readouts), 3.2))
    for j, mode in enumerate(modes):
        xs, means, sems = [], [], []
        for i, ro in enumerate(readouts):
            match = [r for r in rows if r.mode == mode and r.readout == ro]
            if not match:
                continue
            xs.append(i + (j - (len(modes) - 1) / 2) * width)
            means.append(match[0].mean_err)
            sems.append(match[0].sem or 0.0)
        ax.bar(xs, means, width, yerr=sems, capsize=3, label=mode,
               color=MODE_COLORS.get(mode))
    ax.set_xticks(range(len(readouts)))
    ax.set_xticklabels([f"{ro} readout" for ro in readouts])
    ax.set_ylabel("test error")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(records, path: str, title: str = ""):
    """Loss and validation/test error against epoch for one run."""
    epochs = [r.epoch for r in records]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7.5, 3.0))
    ax0.plot(epochs, [r.train_loss for r in records], label="train")
    if any(r.valid_loss is not None for r in records):
        ax0.plot(epochs, [np.nan if r.valid_loss is None else r.valid_loss for r in records],
                 label="valid")
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("loss")
    ax0.legend(frameon=False)
    for attr in ("valid_error", "test_error"):
        vals = [getattr(r, attr) for r in records]
        if any(v is not None for v in vals):
            ax1.plot(epochs, [np.nan if v is None else v for v in vals], label=attr.split("_")[0])
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("error")
    ax1.set_ylim(0, 1)
    ax1.legend(frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_scaling(rows, path: str, x: str = "k", y: str = "mem_elements"):
    """Log-log cost curves, one line per engine."""
    fig, ax = plt.subplots(figsize=(4.0, 3.2))
    for engine in dict.fromkeys(r["engine"] for r in rows):
        sel = sorted((r[x], r[y]) for r in rows if r["engine"] == engine)
        ax.loglog([p[0] for p in sel], [p[1] for p in sel], "o-", label=engine)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
