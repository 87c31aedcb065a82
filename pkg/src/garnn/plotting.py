"""Figures for reports. Everything is written as SVG.

The feature-map heatmap is emitted by hand so each cell is exactly one
``<rect>`` carrying its value; the remaining figures go through matplotlib's
object API (no pyplot state).
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import matplotlib
import numpy as np
from matplotlib.figure import Figure

CELL = 14
LEFT = 110
TOP = 34
BOTTOM = 30


def gray(v: float) -> str:
    level = int(round(255 * min(max(v, 0.0), 1.0)))
    return f"#{level:02x}{level:02x}{level:02x}"


def heatmap_svg(fmap: np.ndarray, names: Sequence[str], title: str = "",
                tick_every: int = 6) -> str:
    """Variables on the y axis, timesteps 1..T on the x axis; brighter is higher."""
    fmap = np.asarray(fmap, dtype=np.float64)
    N, T = fmap.shape
    width = LEFT + T * CELL + 10
    height = TOP + N * CELL + BOTTOM
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f'<text x="{LEFT}" y="{TOP - 14}" font-size="12">{escape(title)}</text>',
    ]
    for j, name in enumerate(names):
        y = TOP + j * CELL
        out.append(f'<text class="ylabel" x="{LEFT - 6}" y="{y + CELL - 3}" '
                   f'text-anchor="end">{escape(str(name))}</text>')
        for t in range(T):
            v = fmap[j, t]
            out.append(f'<rect class="cell" x="{LEFT + t * CELL}" y="{y}" width="{CELL}" '
                       f'height="{CELL}" fill="{gray(v)}" data-var="{escape(str(name))}" '
                       f'data-t="{t + 1}" data-value="{v:.6f}"/>')
    base = TOP + N * CELL
    for t in range(T):
        if (t + 1) % tick_every == 0 or t == 0:
            out.append(f'<text class="xlabel" x="{LEFT + t * CELL + CELL / 2}" y="{base + 12}" '
                       f'text-anchor="middle">{t + 1}</text>')
    out.append(f'<text x="{LEFT + T * CELL / 2}" y="{base + 26}" text-anchor="middle">timestep t</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap_svg(fmap: np.ndarray, names: Sequence[str], path, title: str = "") -> None:
    Path(path).write_text(heatmap_svg(fmap, names, title))


def _save(fig: Figure, path) -> None:
    # fixed salt and no date so the same figure always serializes to the same bytes
    with matplotlib.rc_context({"svg.hashsalt": "garnn"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def loss_curve_figure(curve, path, best_epoch: int | None = None) -> None:
    epochs = [r.epoch for r in curve]
    fig = Figure(figsize=(6, 3.5))
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(epochs, [r.train_loss for r in curve], color="k", lw=1.2, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss (normalized)")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.val_rmse for r in curve], color="tab:red", lw=1.2, label="val RMSE")
    ax2.set_ylabel("validation RMSE", color="tab:red")
    if best_epoch is not None:
        ax.axvline(best_epoch, ls=":", color="grey")
    fig.tight_layout()
    _save(fig, path)


def prediction_figure(y, y_hat, path, interval: float = 5.0, persistence=None) -> None:
    t = np.arange(len(y)) * interval / 60.0
    fig = Figure(figsize=(8, 3))
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(t, y, color="k", lw=1.0, label="measured")
    ax.plot(t, y_hat, color="tab:blue", lw=1.0, label="forecast")
    if persistence is not None:
        ax.plot(t, persistence, color="grey", lw=0.8, ls="--", label="persistence")
    ax.axhspan(70, 180, color="tab:green", alpha=0.06)
    ax.set_xlabel("hours")
    ax.set_ylabel("glucose (mg/dL)")
    ax.legend(loc="upper right", fontsize=8, frameon=False)
    fig.tight_layout()
    _save(fig, path)


def feature_map_figure(fmap: np.ndarray, names: Sequence[str], path, series=None,
                       series_names: Sequence[str] | None = None, title: str = "") -> None:
    """Heatmap over the raw window it explains, stacked like a publication panel."""
    fmap = np.asarray(fmap)
    N, T = fmap.shape
    rows = 2 if series is not None else 1
    fig = Figure(figsize=(max(6, T * 0.14), 1.2 + 0.3 * N + (2 if series is not None else 0)))
    ax = fig.add_subplot(rows, 1, 1)
    ax.pcolormesh(np.arange(T + 1) + 0.5, np.arange(N + 1) - 0.5, fmap, cmap="gray", vmin=0, vmax=1)
    ax.set_yticks(range(N))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_title(title, fontsize=9)
    if series is not None:
        ax2 = fig.add_subplot(rows, 1, 2, sharex=ax)
        series = np.atleast_2d(series)
        for k, s in enumerate(series):
            label = series_names[k] if series_names else None
            ax2.plot(np.arange(1, T + 1), s, lw=1.0, label=label)
        ax2.set_xlabel("timestep t")
        if series_names:
            ax2.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    _save(fig, path)


def ranking_figure(ranking, path, title: str = "") -> None:
    order = ranking.order
    fig = Figure(figsize=(6, 0.4 * len(order) + 1))
    ax = fig.add_subplot(1, 1, 1)
    ax.barh(range(len(order)), ranking.values[order], color="dimgray")
    ax.set_yticks(range(len(order)))
    ax.set_yticklabels([ranking.names[j] for j in order])
    ax.invert_yaxis()
    ax.set_xlabel("dataset importance")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)
