"""Figures written next to the text/jsonl reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width=4.0, height=2.6):
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height))


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_loss_curve(log_path, out_path):
    from .train import read_loss_log

    cols = read_loss_log(log_path)
    fig, ax = _figure()
    ax.plot(cols["step"], cols["loss"], lw=1, label="total")
    ax.plot(cols["step"], cols["l_tri"], lw=0.8, label="triplet")
    ax.plot(cols["step"], cols["l_ce"], lw=0.8, label="cross-entropy")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    _save(fig, out_path)


def plot_view_matrix(rep, out_path):
    """Heatmap of rank-1 accuracy per (condition, probe view)."""
    k = rep.ranks[0]
    views = sorted({v for c in rep.per_view.values() for v in c})
    grid = np.full((len(rep.conditions), len(views)), np.nan)
    for i, c in enumerate(rep.conditions):
        for j, v in enumerate(views):
            if v in rep.per_view.get(c, {}):
                grid[i, j] = rep.per_view[c][v][k]
    fig, ax = _figure(0.8 + 0.6 * len(views), 0.8 + 0.4 * len(rep.conditions))
    im = ax.imshow(grid, vmin=0, vmax=100, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(views)), views)
    ax.set_yticks(range(len(rep.conditions)), rep.conditions)
    ax.set_xlabel("probe view")
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.0f}", ha="center", va="center", fontsize=7,
                        color="white" if grid[i, j] < 60 else "black")
    fig.colorbar(im, ax=ax, label=f"rank-{k} (%)")
    _save(fig, out_path)


def plot_ablation_table(title, row_labels, means, out_path):
    fig, ax = _figure(1.5 + 0.45 * len(row_labels), 2.6)
    x = np.arange(len(row_labels))
    ax.bar(x, means, color="0.55")
    ax.set_xticks(x, row_labels, rotation=45, ha="right")
    ax.set_ylabel("mean rank-1 (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    _save(fig, out_path)
