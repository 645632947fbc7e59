"""Static plots: BEV occupancy maps, flow quivers, planned trajectories,
and training-loss curves.  Everything renders to image files, no display."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import BoundaryNorm, ListedColormap  # noqa: E402
from matplotlib.lines import Line2D  # noqa: E402

from .occgrid import CLASS_NAMES, OccupancyGrid  # noqa: E402
from .worldgen import SceneSample  # noqa: E402

CLASS_COLORS = (
    "#f5f5f5",  # free
    "#d62728",  # car
    "#ff7f0e",  # truck
    "#e377c2",  # pedestrian
    "#17becf",  # bicycle
    "#9e9e9e",  # road
    "#8c564b",  # building
    "#2ca02c",  # vegetation
    "#bcbd22",  # barrier
)


def bev_class_map(occ: OccupancyGrid) -> np.ndarray:
    """Top-most occupied class per column, 0 where the column is empty."""
    labels = occ.labels
    occupied = labels != 0
    top = occupied * (np.arange(labels.shape[-1]) + 1)
    idx = top.argmax(axis=-1)
    out = np.take_along_axis(labels, idx[..., None], axis=-1)[..., 0]
    return np.where(occupied.any(axis=-1), out, 0)


def _draw_occupancy(ax, occ: OccupancyGrid, title: str):
    cmap = ListedColormap(CLASS_COLORS)
    norm = BoundaryNorm(np.arange(len(CLASS_COLORS) + 1) - 0.5, cmap.N)
    ax.imshow(bev_class_map(occ).T, origin="lower", cmap=cmap, norm=norm,
              interpolation="nearest")
    ax.plot(occ.spec.nx // 2, occ.spec.ny // 2, marker="^", color="black",
            markersize=6)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])


def _draw_flow(ax, scene: SceneSample, title: str,
               velocity: np.ndarray | None = None):
    _draw_occupancy(ax, scene.occ, title)
    vel = velocity if velocity is not None else np.asarray(scene.flow.velocity)
    dyn = np.asarray(scene.flow.dynamic_mask)
    cols = dyn.any(axis=-1)
    if cols.any():
        xs, ys = np.nonzero(cols)
        # One arrow per dynamic column, averaged over its occupied bins.
        u = np.array([vel[x, y][dyn[x, y]].mean(axis=0)[0] for x, y in zip(xs, ys)])
        v = np.array([vel[x, y][dyn[x, y]].mean(axis=0)[1] for x, y in zip(xs, ys)])
        ax.quiver(xs, ys, u, v, color="black", width=0.004, scale=40)


def _draw_plan(ax, scene: SceneSample, pred_waypoints: np.ndarray | None):
    gt = np.vstack([[0.0, 0.0], scene.plan.waypoints])
    ax.plot(gt[:, 0], gt[:, 1], "o-", color="#2ca02c", label="reference")
    if pred_waypoints is not None:
        pw = np.vstack([[0.0, 0.0], pred_waypoints])
        ax.plot(pw[:, 0], pw[:, 1], "x--", color="#d62728", label="sampled")
    lim = max(4.0, float(np.abs(gt).max()) * 1.3)
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper left", fontsize=7)
    ax.set_title(f"plan ({scene.command})")
    ax.set_xlabel("x fwd (m)")
    ax.set_ylabel("y left (m)")


def class_legend(fig):
    handles = [Line2D([], [], marker="s", linestyle="", color=c, label=n)
               for n, c in zip(CLASS_NAMES, CLASS_COLORS)]
    fig.legend(handles=handles, loc="lower center", ncol=5, fontsize=7,
               frameon=False)


def plot_scene(scene: SceneSample, out_path: str | Path,
               pred_occ: OccupancyGrid | None = None,
               pred_flow: np.ndarray | None = None,
               pred_plan: np.ndarray | None = None) -> Path:
    """One PNG: reference occupancy+flow, optional predictions, and plans."""
    n_cols = 3 if pred_occ is None else 4
    fig, axes = plt.subplots(1, n_cols, figsize=(3.2 * n_cols, 3.8))
    _draw_occupancy(axes[0], scene.occ, "occupancy (reference)")
    _draw_flow(axes[1], scene, "flow (reference)")
    if pred_occ is not None:
        _draw_occupancy(axes[2], pred_occ, "occupancy (model)")
    _draw_plan(axes[-1], scene, pred_plan)
    class_legend(fig)
    fig.tight_layout(rect=(0, 0.08, 1, 1))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_history(history: list[dict], out_path: str | Path) -> Path:
    """Per-component loss curves over training steps."""
    fig, ax = plt.subplots(figsize=(7, 4))
    keys = [k for k in ("total", "llm", "occ", "flow", "action")
            if any(k in row for row in history)]
    for key in keys:
        xs = [i for i, row in enumerate(history) if key in row]
        ys = [row[key] for row in history if key in row]
        ax.plot(xs, ys, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
