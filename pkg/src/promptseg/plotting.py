"""Figures written next to the CLI outputs: overlays, heatmaps, benchmark charts.

Everything draws on ``matplotlib.figure.Figure`` directly so nothing touches
pyplot's global state, and PNG metadata is stripped to keep bytes stable.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .storage import save_image

# background first; label i uses PALETTE[i % len]
PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
], dtype=np.uint8)

_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    return path


def _as_uint8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr


def colorize(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    colors = PALETTE[1:]
    out = colors[(labels.astype(np.int64) - 1) % len(colors)]
    out[labels == 0] = PALETTE[0]
    return out


def overlay(image, labels, alpha: float = 0.5) -> np.ndarray:
    """Blend label colours over the image; background pixels are left untouched."""
    base = _as_uint8(image).astype(np.float64)
    colors = colorize(labels).astype(np.float64)
    fg = (np.asarray(labels) != 0)[..., None]
    out = np.where(fg, (1 - alpha) * base + alpha * colors, base)
    return np.round(out).astype(np.uint8)


def save_overlay(path, image, mask) -> Path:
    return save_image(path, overlay(image, mask.labels))


def render_heatmaps(image, refined, out_dir, stem: str = "relevance") -> list[Path]:
    """One PNG per category: the image with its refined relevance on top."""
    out_dir = Path(out_dir)
    img = _as_uint8(image)
    paths = []
    for i, m in enumerate(refined.maps, start=1):
        fig = Figure(figsize=(4, 4))
        ax = fig.add_axes([0, 0, 1, 0.92])
        ax.imshow(img)
        ax.imshow(m.scores, cmap="jet", alpha=0.5, vmin=0.0, vmax=1.0)
        ax.set_axis_off()
        title = m.category + (" (low confidence)" if m.low_confidence else "")
        fig.suptitle(title, fontsize=10)
        paths.append(_save(fig, out_dir / f"{stem}_cat_{i}.png"))
    return paths


def render_report(reports: Sequence, path) -> Path:
    """Mean IoU per configuration next to the spread of per-image scores."""
    fig = Figure(figsize=(8, 3.5))
    ax_bar, ax_box = fig.subplots(1, 2)
    names = [f"{r.config.get('method')}\n{'+'.join(r.config.get('views', []))}" for r in reports]
    means = [r.mean_iou for r in reports]
    xs = np.arange(len(reports))
    ax_bar.bar(xs, means, color="#4878a8")
    ax_bar.set_xticks(xs)
    ax_bar.set_xticklabels(names, fontsize=6)
    ax_bar.set_ylim(0, 1)
    ax_bar.set_ylabel("mean IoU")
    for x, m in zip(xs, means):
        ax_bar.text(x, min(m + 0.02, 0.97), f"{m:.3f}", ha="center", fontsize=7)
    data = [list(r.per_image.values()) or [np.nan] for r in reports]
    ax_box.boxplot(data)
    ax_box.set_xticks(xs + 1)
    ax_box.set_xticklabels([str(i) for i in xs], fontsize=7)
    ax_box.set_ylim(0, 1.02)
    ax_box.set_title("per-image IoU", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
