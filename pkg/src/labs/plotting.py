"""Figures written next to the JSON/CSV reports.

Every function takes already-exported data (plain dicts/lists), draws one
figure with the Agg backend and returns the output path.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

VARIANT_COLORS = {"Basic": "#7f7f7f", "LAB": "#1f77b4", "LBS": "#2ca02c", "LABS": "#d62728"}

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.titlesize": 10,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
        "font.sans-serif": ["Noto Sans CJK SC", "WenQuanYi Zen Hei", "DejaVu Sans"],
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    with warnings.catch_warnings():
        # CJK token labels render as boxes when no CJK font is installed
        warnings.filterwarnings("ignore", message="Glyph .* missing from font")
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_learning_curves(curves: dict[str, list[dict]], path) -> Path:
    """curves: variant -> list of {epoch, train_loss, val_loss}."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharex=True)
    for variant, rows in curves.items():
        epochs = [r["epoch"] for r in rows]
        color = VARIANT_COLORS.get(variant)
        axes[0].plot(epochs, [r["train_loss"] for r in rows], color=color, label=variant)
        axes[1].plot(epochs, [r["val_loss"] for r in rows], color=color, label=variant)
    axes[0].set_title("training loss")
    axes[1].set_title("validation loss")
    for ax in axes:
        ax.set_xlabel("epoch")
    axes[1].legend(frameon=False)
    return _save(fig, path)


def plot_stop_epochs(stop_epochs: dict[str, int], path) -> Path:
    fig, ax = plt.subplots(figsize=(3.5, 3))
    names = list(stop_epochs)
    ax.bar(names, [stop_epochs[n] for n in names], color=[VARIANT_COLORS.get(n, "C0") for n in names])
    ax.set_ylabel("epochs before early stop")
    return _save(fig, path)


def plot_metric_table(table: dict, path) -> Path:
    """Grouped bars of P/R/F1 at each k, one bar per variant."""
    rows = table["rows"]
    variants = table["columns"]
    names = list(rows)
    x = np.arange(len(names))
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(9, 3.2))
    for i, v in enumerate(variants):
        vals = [rows[r][v] or 0.0 for r in names]
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, vals, width, label=v, color=VARIANT_COLORS.get(v))
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, ncol=len(variants))
    return _save(fig, path)


def plot_attention(record: dict, path, max_labels: int = 8) -> Path:
    """Heatmap of one exported attention record (fwd and bwd, averaged)."""
    tokens = record["tokens"]
    n = len(tokens)
    a = (np.asarray(record["A_fwd"]) + np.asarray(record["A_bwd"])) / 2.0
    label_names = record.get("label_names") or [str(i) for i in range(a.shape[0])]
    rows = record.get("labels") or list(range(min(max_labels, a.shape[0])))
    rows = [label_names.index(r) if isinstance(r, str) else r for r in rows][:max_labels]
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * n + 1.5), 0.4 * len(rows) + 1.2))
    im = ax.imshow(a[rows, :n], aspect="auto", cmap="Reds", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n))
    ax.set_xticklabels(tokens, rotation=90)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([label_names[r] for r in rows])
    fig.colorbar(im, ax=ax, fraction=0.03)
    return _save(fig, path)


def plot_distributions(record: dict, path) -> Path:
    """Simulated and predicted label distributions with true labels marked."""
    y_t = np.asarray(record["y_t"])
    idx = np.arange(len(y_t))
    fig, ax = plt.subplots(figsize=(max(4, 0.25 * len(y_t) + 2), 3))
    if record.get("y_s") is not None:
        ax.plot(idx, record["y_s"], marker="o", ms=3, label="simulated")
    ax.plot(idx, record["y_p"], marker="s", ms=3, label="predicted")
    for j in np.flatnonzero(y_t):
        ax.axvline(j, ls=":", color="k", lw=0.8)
    ax.set_xlabel("label index")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_length_histogram(lengths: dict[str, list[int]], path) -> Path:
    """Input sequence length distribution per formula mode."""
    fig, ax = plt.subplots(figsize=(5, 3))
    top = max((max(v) for v in lengths.values() if v), default=1)
    bins = np.arange(0, top + 2)
    for mode, values in lengths.items():
        ax.hist(values, bins=bins, histtype="step", label=mode)
    ax.set_xlabel("tokens per question")
    ax.legend(frameon=False)
    return _save(fig, path)
