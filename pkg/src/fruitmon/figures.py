"""Report figures (matplotlib, file output only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cloud import BACKGROUND_ID, ColoredCloud, SceneAnnotation, TemporalAssociation, instance_palette

_MAX_SCATTER = 20000


def _scatter_instances(ax, cloud: ColoredCloud, ann: SceneAnnotation, title: str) -> None:
    n = len(cloud)
    ids = ann.instance_ids(n)
    step = max(1, n // _MAX_SCATTER)
    sel = np.arange(0, n, step)
    colors = np.full((sel.size, 3), 0.82)
    fg = ids[sel] >= 0
    if fg.any():
        palette = instance_palette(max(len(ann.instances), 1))
        colors[fg] = palette[ids[sel][fg] % len(palette)]
    ax.scatter(cloud.points[sel, 0], cloud.points[sel, 2], s=1.2, c=colors, linewidths=0)
    ax.set_title(f"{title} ({len(ann.instances)} instances)")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal")


def save_seg_figure(path, cloud: ColoredCloud, pred: SceneAnnotation,
                    gt: SceneAnnotation | None = None) -> None:
    """Front view of the segmentation (and the reference, when given)."""
    panels = 1 if gt is None else 2
    fig, axes = plt.subplots(1, panels, figsize=(6.5 * panels, 4.5), squeeze=False)
    _scatter_instances(axes[0, 0], cloud, pred, "predicted")
    if gt is not None:
        _scatter_instances(axes[0, 1], cloud, gt, "reference")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_match_figure(path, centers_t: np.ndarray, centers_prev: np.ndarray,
                      assoc: TemporalAssociation) -> None:
    """Centers of both scans with the predicted association drawn as lines;
    unmatched current fruits are crossed."""
    centers_t = np.asarray(centers_t, dtype=np.float64).reshape(-1, 3)
    centers_prev = np.asarray(centers_prev, dtype=np.float64).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    if centers_prev.size:
        ax.scatter(centers_prev[:, 0], centers_prev[:, 2], s=46, marker="o",
                   facecolors="none", edgecolors="#777777", label="previous")
    if centers_t.size:
        ax.scatter(centers_t[:, 0], centers_t[:, 2], s=30, marker="o",
                   color="#c23b22", label="current")
    for i, j in sorted(assoc.pairs.items()):
        if j is None:
            ax.scatter([centers_t[i, 0]], [centers_t[i, 2]], s=90, marker="x",
                       color="#2a6fb0")
        else:
            ax.plot([centers_t[i, 0], centers_prev[j, 0]],
                    [centers_t[i, 2], centers_prev[j, 2]],
                    color="#3a9d5d", linewidth=1.4)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("temporal association (x = new fruit)")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_training_figure(path, history: list[dict]) -> None:
    """Loss curve plus any evaluation series present in the history."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    epochs = [r["epoch"] for r in history]
    ax.plot(epochs, [r["loss"] for r in history], color="#2a6fb0", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    extra = [k for k in ("val_pq", "train_mf1", "val_mf1")
             if any(k in r for r in history)]
    if extra:
        ax2 = ax.twinx()
        for key, color in zip(extra, ("#3a9d5d", "#c23b22", "#8a5fb0")):
            xs = [r["epoch"] for r in history if key in r]
            ys = [r[key] for r in history if key in r]
            ax2.plot(xs, ys, color=color, marker="o", markersize=3, label=key)
        ax2.set_ylabel("score")
        ax2.set_ylim(0.0, 1.05)
        handles, labels = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(handles + h2, labels + l2, loc="center right", fontsize=8)
    else:
        ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_curve_figure(path, rows: list[dict], x_key: str, y_keys: list[str],
                      *, title: str = "") -> None:
    """Generic score-vs-parameter curves (threshold grids, epsilon sweeps)."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    xs = [r[x_key] for r in rows]
    for key, color in zip(y_keys, ("#2a6fb0", "#3a9d5d", "#c23b22", "#8a5fb0")):
        ax.plot(xs, [r[key] for r in rows], color=color, marker="o",
                markersize=4, label=key)
    ax.set_xlabel(x_key)
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
