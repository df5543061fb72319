"""Figure and image emission (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .flowvis import flow_to_rgb  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_PNG_META = {"Software": None}


def to_uint8(rgb):
    return np.clip(np.floor(np.asarray(rgb, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(path, rgb):
    """Write an ``(H, W, 3)`` image in [0, 1] (or uint8) losslessly."""
    img = rgb if np.asarray(rgb).dtype == np.uint8 else to_uint8(rgb)
    plt.imsave(path, img, format="png", metadata=_PNG_META)
    return Path(path)


def save_flow_frames(maps, out_dir, prefix="flow", max_magnitude=None):
    """One PNG per frame of the color-wheel visualization of ``(L, H, W, 2)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rgb = flow_to_rgb(maps, max_magnitude)
    return [save_png(out / f"{prefix}_{i:03d}.png", frame) for i, frame in enumerate(rgb)]


def save_video_frames(video, out_dir, prefix="frame"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [save_png(out / f"{prefix}_{i:03d}.png", frame) for i, frame in enumerate(video)]


def plot_trajectory_overlay(trajectories, path, dims=None, background=None):
    """Each trajectory as a polyline through its points, markers colored by frame.

    Returns the number of markers drawn.
    """
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    if background is not None:
        ax.imshow(background)
    markers = 0
    cmap = plt.get_cmap("viridis")
    for traj in trajectories:
        pts = traj.points
        ax.plot(pts[:, 0], pts[:, 1], color="0.5", lw=1, zorder=1)
        t = np.linspace(0, 1, len(pts)) if len(pts) > 1 else np.zeros(1)
        ax.scatter(pts[:, 0], pts[:, 1], c=cmap(t), s=14, zorder=2)
        markers += len(pts)
    if dims is not None:
        L, H, W = dims
        ax.set_xlim(-0.5, W - 0.5)
        ax.set_ylim(H - 0.5, -0.5)
    else:
        ax.invert_yaxis()
    ax.set_aspect("equal")
    ax.set_xlabel("x (px)")
    ax.set_ylabel("y (px)")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return markers


def plot_ablation(tables, out_dir):
    """One bar chart of TrajError per ablation axis."""
    out = Path(out_dir)
    paths = []
    for axis, rows in tables.items():
        rows = [r for r in rows if r[1] is not None]
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        ax.bar([r[0] for r in rows], [r[1] for r in rows], color="tab:blue")
        ax.set_ylabel("TrajError (px)")
        ax.set_title(axis)
        fig.tight_layout()
        p = out / f"ablation_{axis}.png"
        fig.savefig(p, metadata=_PNG_META)
        plt.close(fig)
        paths.append(p)
    return paths


def plot_duration_error(series, path):
    """TrajError against clip length, one line per resolution."""
    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    for height in sorted({h for _, h, _ in series}):
        pts = [(n, e) for n, h, e in series if h == height]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"H={height}")
    ax.set_xlabel("frames")
    ax.set_ylabel("TrajError (px)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_loss_curve(records, path):
    """Training loss per step, colored by curriculum stage."""
    fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
    for stage in dict.fromkeys(r["stage"] for r in records):
        pts = [(r["step"], r["loss"]) for r in records if r["stage"] == stage]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=0.8, label=stage)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)
