"""User trajectories and their rasterization into displacement maps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ValidationError

DEFAULT_SIGMA = 3.0


@dataclass
class Trajectory:
    """Per-frame ``(x, y)`` pixel positions of one object.

    ``x`` indexes columns and ``y`` rows; pixel ``(j, i)`` has its center at
    ``x = j, y = i``.
    """

    points: np.ndarray
    object_id: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.isfinite(self.points).all():
            raise ValidationError(f"trajectory {self.object_id!r} has non-finite points")

    def __len__(self):
        return len(self.points)

    def validate(self, dims):
        """Check length and bounds against ``(L, H, W)``."""
        L, H, W = dims
        if len(self) != L:
            raise ValidationError(
                f"trajectory {self.object_id!r} has {len(self)} points, expected {L} frames"
            )
        x, y = self.points[:, 0], self.points[:, 1]
        bad = (x < 0) | (x >= W) | (y < 0) | (y >= H)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(
                f"trajectory {self.object_id!r} point {i} {tuple(self.points[i])} "
                f"outside a {W}x{H} frame"
            )
        return self


def trajectory_offsets(traj, num_frames=None):
    """Frame-to-frame ``(u, v)`` offsets, shape ``(L, 2)``; the last row is zero."""
    pts = traj.points if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    if num_frames is not None and len(pts) != num_frames:
        raise ValidationError(f"trajectory has {len(pts)} points, expected {num_frames}")
    off = np.zeros_like(pts)
    off[:-1] = pts[1:] - pts[:-1]
    return off


def gaussian_kernel1d(sigma):
    """Normalized 1D Gaussian truncated at radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_filter_frames(maps, sigma):
    """Zero-padded separable Gaussian over the two spatial axes of ``(L, H, W, C)``."""
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(maps, k, axis=1, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, k, axis=2, mode="constant", cval=0.0)


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def splat_trajectories(trajs, dims):
    """Unfiltered displacement map: offset ``i-1`` placed at the rounded frame
    ``i-1`` position in frame ``i``. Frame 0 is zero."""
    L, H, W = dims
    g = np.zeros((L, H, W, 2), dtype=np.float64)
    for traj in trajs:
        traj.validate(dims)
        off = trajectory_offsets(traj)
        cols = np.minimum(round_half_up(traj.points[:, 0]), W - 1)
        rows = np.minimum(round_half_up(traj.points[:, 1]), H - 1)
        for i in range(1, L):
            g[i, rows[i - 1], cols[i - 1]] += off[i - 1]
    return g


def rasterize_trajectories(trajs, dims, sigma=DEFAULT_SIGMA):
    """Gaussian-smoothed trajectory map ``(L, H, W, 2)`` in pixels/frame."""
    if sigma <= 0:
        raise ValidationError("sigma must be > 0")
    g = gaussian_filter_frames(splat_trajectories(trajs, dims), sigma)
    g[0] = 0.0
    return g


def dense_flow_map(flow):
    """Trajectory-map convention for a dense forward flow ``(L, H, W, 2)``.

    ``flow[i]`` moves frame ``i`` to ``i+1``; the map carries it in frame
    ``i+1`` and frame 0 is zero, matching :func:`rasterize_trajectories`.
    """
    flow = np.asarray(flow, dtype=np.float64)
    g = np.zeros_like(flow)
    g[1:] = flow[:-1]
    return g


def resample_trajectory(traj, num_frames):
    """Linearly time-resample control points to ``num_frames`` points."""
    pts = traj.points
    src = np.linspace(0.0, 1.0, len(pts))
    dst = np.linspace(0.0, 1.0, num_frames)
    out = np.stack([np.interp(dst, src, pts[:, 0]), np.interp(dst, src, pts[:, 1])], axis=1)
    return Trajectory(out, traj.object_id)


def trajectories_to_records(trajs):
    return [
        {"object_id": t.object_id, "points": [[float(x), float(y)] for x, y in t.points]}
        for t in trajs
    ]


def save_trajectory_file(path, trajs):
    """One JSON object per line: ``{"object_id": ..., "points": [[x, y], ...]}``."""
    lines = [json.dumps(r, sort_keys=True) for r in trajectories_to_records(trajs)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_trajectory_file(path, dims=None):
    trajs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            traj = Trajectory(rec["points"], rec.get("object_id"))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{n}: malformed trajectory record ({exc})") from exc
        if dims is not None:
            traj.validate(dims)
        trajs.append(traj)
    return trajs
