"""Motion-controllability and reconstruction metrics, run records and
ablation reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import archive
from .errors import ValidationError
from .trajectory import Trajectory


@dataclass
class TrackResult:
    tracked: np.ndarray  # (L, 2) x, y
    confidence: np.ndarray  # (L,)

    def __len__(self):
        return len(self.tracked)


def _points(track):
    if isinstance(track, Trajectory):
        return track.points
    if isinstance(track, TrackResult):
        return track.tracked
    return np.asarray(track, dtype=np.float64).reshape(-1, 2)


def trajectory_error(predefined, tracked) -> float:
    """Mean over frames of ``|dx| + |dy|``."""
    a, b = _points(predefined), _points(tracked)
    if len(a) != len(b):
        raise ValidationError(f"track lengths differ: {len(a)} vs {len(b)}")
    return float(np.abs(a - b).sum(axis=1).mean())


def track_centroid(video, background_level=0.2, start=None) -> TrackResult:
    """Intensity-weighted centroid of pixels brighter than ``background_level``.

    ``video`` is ``(L, H, W, 3)`` or ``(L, H, W)`` in [0, 1]. Confidence is the
    fraction of frame mass that counts as foreground. Frames without foreground
    get confidence 0 and repeat the previous centroid (``start``, or the frame
    center, before the first detection).
    """
    video = np.asarray(video, dtype=np.float64)
    if not np.isfinite(video).all():
        raise ValidationError("video contains non-finite values")
    lum = video.mean(axis=-1) if video.ndim == 4 else video
    L, H, W = lum.shape
    ys, xs = np.mgrid[:H, :W]
    prev = np.array(start if start is not None else ((W - 1) / 2.0, (H - 1) / 2.0), dtype=np.float64)
    tracked = np.zeros((L, 2))
    conf = np.zeros(L)
    for i in range(L):
        fg = np.where(lum[i] > background_level, lum[i], 0.0)
        mass = fg.sum()
        if mass > 0:
            prev = np.array([(fg * xs).sum() / mass, (fg * ys).sum() / mass])
            total = lum[i].sum()
            conf[i] = mass / total if total > 0 else 0.0
        tracked[i] = prev
    return TrackResult(tracked, conf)


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; identical inputs give ``inf``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    t = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Gaussian-windowed SSIM on ``(L, H, W[, C])`` volumes in [0, 1], averaged
    over valid window positions, channels and frames."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[1:3]
    size = min(window, H if H % 2 else H - 1, W if W % 2 else W - 1)
    k = _gaussian_window(size, sigma)
    c1, c2 = k1**2, k2**2
    pad = size // 2

    def filt(x):
        x = ndimage.correlate1d(x, k, axis=1, mode="reflect")
        x = ndimage.correlate1d(x, k, axis=2, mode="reflect")
        return x[:, pad:H - pad, pad:W - pad]

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- run records

def config_hash(config) -> str:
    return hashlib.sha256(archive.canonical_json(config).encode()).hexdigest()[:16]


def run_record(config, metrics, provenance="") -> dict:
    return {
        "config": config,
        "config_hash": config_hash(config),
        "metrics": metrics,
        "provenance": provenance,
    }


def save_run_record(path, record):
    archive.atomic_write_bytes(Path(path), (archive.canonical_json(record) + "\n").encode())


def load_run_records(paths):
    return [json.loads(Path(p).read_text()) for p in paths]


# ------------------------------------------------------------------ reporting

ABLATION_AXES = ("compression", "fuser", "curriculum")
RESERVED_COLUMNS = ("fvd", "clipsim")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.4f}"
    return str(v)


def ablation_tables(runs):
    """``{axis: rows}``; each row is ``(value, traj_error, loss, fvd, clipsim, run_id)``
    sorted by trajectory error ascending."""
    if not runs:
        raise ValidationError("ablation report needs at least one run")
    tables = {}
    for axis in ABLATION_AXES:
        rows = []
        for run in runs:
            cfg, m = run["config"], run["metrics"]
            if axis not in cfg.get("ablation", {}):
                continue
            rows.append((
                str(cfg["ablation"][axis]),
                m.get("traj_error"),
                m.get("loss"),
                m.get("fvd"),
                m.get("clipsim"),
                run.get("config_hash", ""),
            ))
        if rows:
            rows.sort(key=lambda r: (math.inf if r[1] is None else r[1], r[0], r[5]))
            tables[axis] = rows
    return tables


def duration_series(runs):
    """``[(num_frames, height, traj_error)]`` from runs reporting per-duration errors."""
    out = []
    for run in runs:
        for entry in run["metrics"].get("by_duration", []):
            out.append((int(entry["num_frames"]), int(entry.get("height", 0)), float(entry["traj_error"])))
    return sorted(out)


def ablation_report(runs):
    """Return ``(text, {name: csv_text})``; deterministic for a given run list."""
    tables = ablation_tables(runs)
    header = ["value", "traj_error", "loss", *RESERVED_COLUMNS, "config_hash"]
    lines = []
    csvs = {}
    for axis, rows in tables.items():
        lines.append(f"== {axis} ==")
        widths = [max(len(h), *(len(_fmt(r[i])) for r in rows)) for i, h in enumerate(header)]
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
        for r in rows:
            lines.append("  ".join(_fmt(v).ljust(w) for v, w in zip(r, widths)).rstrip())
        lines.append("")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_fmt(v) for v in r] for r in rows])
        csvs[f"ablation_{axis}.csv"] = buf.getvalue()
    series = duration_series(runs)
    if series:
        lines.append("== trajectory error vs duration ==")
        lines.append("num_frames  height  traj_error")
        for n, h, e in series:
            lines.append(f"{n:<10d}  {h:<6d}  {e:.4f}")
        lines.append("")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["num_frames", "height", "traj_error"])
        writer.writerows([[n, h, f"{e:.4f}"] for n, h, e in series])
        csvs["duration_error.csv"] = buf.getvalue()
    return "\n".join(lines), csvs


def write_report(runs, out_dir, figures=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, csvs = ablation_report(runs)
    archive.atomic_write_bytes(out / "report.txt", text.encode())
    for name, body in csvs.items():
        archive.atomic_write_bytes(out / name, body.encode())
    if figures:
        from . import plotting

        plotting.plot_ablation(ablation_tables(runs), out)
        series = duration_series(runs)
        if series:
            plotting.plot_duration_error(series, out / "duration_error.png")
    return out
