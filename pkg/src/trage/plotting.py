"""PNG figures for CLI reports.

Figures are built on an explicit Agg canvas so nothing touches pyplot's
global state; each function writes one file and returns its path.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    return path


def plot_losses(path: str | Path, steps: Sequence[int], series: dict[str, Sequence[float]], title: str = "") -> Path:
    """Line plot of one or more loss series against step; NaN points are skipped."""
    fig = Figure(figsize=(6, 3.6))
    ax = fig.add_subplot()
    x = np.asarray(steps)
    for name, ys in series.items():
        y = np.asarray(ys, dtype=float)
        ok = np.isfinite(y)
        if ok.any():
            ax.plot(x[ok], y[ok], label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_confusion(path: str | Path, confusion: np.ndarray, names: Sequence[str]) -> Path:
    n = len(names)
    fig = Figure(figsize=(1.2 + 0.6 * n, 1.0 + 0.6 * n))
    ax = fig.add_subplot()
    im = ax.imshow(confusion, cmap="Blues")
    fig.colorbar(im, ax=ax)
    ax.set_xticks(range(n), names, rotation=45, ha="right")
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    hi = confusion.max() if confusion.size else 0
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(confusion[i, j]), ha="center", va="center",
                    color="white" if confusion[i, j] > hi / 2 else "black", fontsize=8)
    return _save(fig, path)


def plot_length_comparison(
    path: str | Path, rows: Sequence[tuple[int, float, float]], title: str, empirical_label: str = "empirical"
) -> Path:
    """Side-by-side bars of an empirical length distribution and the geometric pmf."""
    k = np.array([r[0] for r in rows])
    emp = np.array([r[1] for r in rows])
    geo = np.array([r[2] for r in rows])
    fig = Figure(figsize=(6, 3.6))
    ax = fig.add_subplot()
    ax.bar(k - 0.2, emp, width=0.4, label=empirical_label)
    ax.bar(k + 0.2, geo, width=0.4, label="geometric pmf")
    ax.set_xlabel("length")
    ax.set_ylabel("frequency")
    ax.set_xticks(k)
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_history(path: str | Path, history: Sequence[dict[str, float]]) -> Path:
    """Fine-tuning curves: train loss and validation macro-F1 per epoch."""
    fig = Figure(figsize=(6, 3.6))
    ax = fig.add_subplot()
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    if any("val_macro_f1" in h for h in history):
        ax2 = ax.twinx()
        ax2.plot(epochs, [h.get("val_macro_f1", np.nan) for h in history], marker="s",
                 color="tab:orange", label="val macro-F1")
        ax2.set_ylabel("val macro-F1")
        ax2.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    return _save(fig, path)
