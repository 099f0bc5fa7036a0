"""Figure rendering for the report paths: loss curves for a single run,
scheme comparison bars for the ablation grid, and sweep heatmaps.

Every figure lands next to the CSV it illustrates.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import read_rows


def plot_training_curves(metrics_csv, out_path) -> Path:
    rows = read_rows(metrics_csv)
    out_path = Path(out_path)
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for column, label in [
        ("loss_std", "standard"),
        ("loss_adv", "adversarial"),
        ("loss_cmx", "cutmix"),
        ("loss_total", "total"),
    ]:
        ys = [(float(r[column]) if r[column] else np.nan) for r in rows]
        if np.isfinite(ys).any():
            ax.plot(epochs, ys, marker="o", markersize=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    scheme = rows[0]["scheme"] if rows else ""
    ax.set_title(f"training losses ({scheme})")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_scheme_comparison(results: dict[str, list[float]], out_path, title: str) -> Path:
    """Bar chart of probe accuracy per scheme; error bars over seeds."""
    out_path = Path(out_path)
    names = list(results)
    means = [float(np.mean(results[n])) for n in names]
    errs = [float(np.std(results[n])) for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 4))
    xs = np.arange(len(names))
    ax.bar(xs, means, yerr=errs, capsize=3, color="#4878cf")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("linear probe top-1")
    ax.set_title(title)
    for x, m in zip(xs, means):
        ax.text(x, m, f"{m:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_sweep_heatmap(values: np.ndarray, row_labels, col_labels, row_name: str,
                       col_name: str, out_path, title: str) -> Path:
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(values, cmap="viridis")
    ax.set_xticks(range(len(col_labels)), [str(c) for c in col_labels])
    ax.set_yticks(range(len(row_labels)), [str(r) for r in row_labels])
    ax.set_xlabel(col_name)
    ax.set_ylabel(row_name)
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            ax.text(j, i, f"{values[i, j]:.3f}", ha="center", va="center", color="white", fontsize=9)
    fig.colorbar(im, ax=ax, label="linear probe top-1")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_cell_bars(cells: dict[str, float], out_path, xlabel: str, title: str) -> Path:
    out_path = Path(out_path)
    names = list(cells)
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 4))
    xs = np.arange(len(names))
    ax.bar(xs, [cells[n] for n in names], color="#6acc65")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("linear probe top-1")
    ax.set_title(title)
    for x, n in zip(xs, names):
        ax.text(x, cells[n], f"{cells[n]:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
