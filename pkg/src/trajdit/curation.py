"""Clip filtering: validity, resolution, camera motion and probabilistic
retention, composed into a manifest with a per-filter rejection log."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from .errors import MissingDependencyError, ValidationError

MIN_AESTHETIC = 5.5
MIN_FLOW_SCORE = 3.0
MIN_SHORT_EDGE = 720
ZOOM_BAND = (0.4, 0.6)
VALID_ANGLES = ((0.0, 20.0), (160.0, 200.0), (340.0, 360.0))
STATIC_MAGNITUDE = 0.5


@dataclass
class FilterResult:
    passed: bool
    reason: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __bool__(self):
        return self.passed


@dataclass
class ClipRecord:
    clip_id: str
    dims: tuple  # (L, H, W)
    flow_score: float
    aesthetic_score: float
    zoom_fraction: float = 0.5
    dominant_angle_deg: float = 0.0
    caption: str = ""
    path: str = ""

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if not (math.isfinite(self.flow_score) and math.isfinite(self.aesthetic_score)):
            raise ValidationError(f"{self.clip_id}: non-finite score")
        if self.flow_score < 0:
            raise ValidationError(f"{self.clip_id}: flow_score must be >= 0")
        if not 0.0 <= self.dominant_angle_deg < 360.0:
            raise ValidationError(f"{self.clip_id}: angle outside [0, 360)")


def validity_filter(record: ClipRecord, min_aesthetic=MIN_AESTHETIC, min_flow=MIN_FLOW_SCORE):
    """Pass only if aesthetic > 5.5 and flow score > 3 (both strict)."""
    if not record.aesthetic_score > min_aesthetic:
        return FilterResult(False, f"aesthetic {record.aesthetic_score:.3f} <= {min_aesthetic}")
    if not record.flow_score > min_flow:
        return FilterResult(False, f"flow score {record.flow_score:.3f} <= {min_flow}")
    return FilterResult(True)


def resolution_filter(record: ClipRecord, min_short_edge=MIN_SHORT_EDGE):
    L, H, W = record.dims
    if min(H, W) >= min_short_edge:
        return FilterResult(True)
    return FilterResult(False, f"short edge {min(H, W)} < {min_short_edge}")


def circular_median_deg(angles_deg, max_candidates=512):
    """Angle minimizing the summed circular distance to ``angles_deg``."""
    a = np.mod(np.asarray(angles_deg, dtype=np.float64), 360.0)
    if a.size == 0:
        return 0.0
    stride = max(1, a.size // max_candidates)
    cand = np.sort(a)[::stride]
    diff = np.abs(cand[:, None] - a[None, :])
    cost = np.minimum(diff, 360.0 - diff).sum(axis=1)
    return float(cand[int(np.argmin(cost))])


def angle_is_valid(angle_deg, intervals=VALID_ANGLES):
    angle = float(np.mod(angle_deg, 360.0))
    return any(lo <= angle <= hi for lo, hi in intervals)


def camera_motion(flow, object_masks=None, static_magnitude=STATIC_MAGNITUDE):
    """Background-flow diagnostics for a ``(L, H, W, 2)`` forward flow.

    ``zoom_fraction`` is the share of moving background vectors pointing away
    from the frame center; ``dominant_angle_deg`` is the circular median of
    their directions, ``atan2(v, u)`` in degrees.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if not np.isfinite(flow).all():
        raise ValidationError("flow contains non-finite values")
    L, H, W, _ = flow.shape
    steps = flow[:-1] if L > 1 else flow
    bg = np.ones(steps.shape[:3], dtype=bool)
    if object_masks is not None and len(object_masks):
        bg &= ~np.asarray(object_masks, dtype=bool).any(axis=0)[: len(steps)]
    vec = steps[bg]
    mag = np.hypot(vec[:, 0], vec[:, 1]) if len(vec) else np.zeros(0)
    mean_mag = float(mag.mean()) if mag.size else 0.0
    moving = mag > static_magnitude
    diag = {"background_magnitude": mean_mag, "moving_fraction": float(moving.mean()) if mag.size else 0.0}
    if not moving.any():
        diag.update(zoom_fraction=float("nan"), dominant_angle_deg=float("nan"))
        return diag
    yy, xx = np.mgrid[:H, :W]
    rel = np.stack([xx - (W - 1) / 2.0, yy - (H - 1) / 2.0], axis=-1)
    rel = np.broadcast_to(rel, steps.shape)[bg][moving]
    outward = (rel * vec[moving]).sum(axis=1) > 0
    angles = np.degrees(np.arctan2(vec[moving, 1], vec[moving, 0]))
    diag.update(zoom_fraction=float(outward.mean()), dominant_angle_deg=circular_median_deg(angles))
    return diag


def camera_motion_filter(flow, object_masks=None, zoom_band=ZOOM_BAND, intervals=VALID_ANGLES,
                         static_magnitude=STATIC_MAGNITUDE):
    """Reject zooms and off-axis pans; static cameras pass.

    A moving background counts as a zoom when its outward fraction leaves
    ``zoom_band`` (a pure pan sits near 0.5, zoom-in near 1, zoom-out near 0).
    """
    diag = camera_motion(flow, object_masks, static_magnitude)
    if diag["background_magnitude"] < static_magnitude:
        return FilterResult(True, "static camera", diag)
    lo, hi = zoom_band
    z = diag["zoom_fraction"]
    if not lo <= z <= hi:
        return FilterResult(False, f"zoom: outward fraction {z:.3f} outside [{lo}, {hi}]", diag)
    angle = diag["dominant_angle_deg"]
    if not angle_is_valid(angle, intervals):
        return FilterResult(False, f"camera pan angle {angle:.1f} deg outside valid intervals", diag)
    return FilterResult(True, "", diag)


def retention_probability(flow_score):
    return max(0.0, 1.0 - flow_score / 100.0)


def retention_decision(flow_score, rng) -> bool:
    """Keep with probability ``max(0, 1 - flow_score / 100)``."""
    if flow_score < 0:
        raise ValidationError("flow_score must be >= 0")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return bool(rng.random() < retention_probability(flow_score))


# ----------------------------------------------------------------- scoring

def flow_score(flow, object_masks=None):
    """Mean flow magnitude over foreground pixels (all pixels without masks)."""
    flow = np.asarray(flow, dtype=np.float64)
    steps = flow[:-1] if len(flow) > 1 else flow
    mag = np.hypot(steps[..., 0], steps[..., 1])
    if object_masks is not None and len(object_masks):
        fg = np.asarray(object_masks, dtype=bool).any(axis=0)[: len(steps)]
        return float(mag[fg].mean()) if fg.any() else 0.0
    return float(mag.mean())


def aesthetic_score(frames):
    """Stub scorer in [0, 10]: 6 x luminance range + 4 x peak saturation."""
    x = np.asarray(frames, dtype=np.float64)
    if x.max() > 1.0:
        x = x / 255.0
    lum = x.mean(axis=-1)
    contrast = float(np.percentile(lum, 99.5) - np.percentile(lum, 0.5))
    mx, mn = x.max(axis=-1), x.min(axis=-1)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-12), 0.0)
    saturation = float(np.percentile(sat, 99.5))
    return float(np.clip(6.0 * contrast + 4.0 * saturation, 0.0, 10.0))


class EchoRefiner:
    """Prompt-refinement client stub: returns the prompt unchanged."""

    timeout = 30.0

    def refine(self, prompt: str) -> str:
        return prompt


def refine_caption(client, prompt):
    """``{"prompt"} -> {"refined_prompt"}``; client errors are surfaced per clip."""
    try:
        return {"refined_prompt": client.refine(prompt), "error": None}
    except Exception as exc:  # noqa: BLE001 - any client failure is reported, not raised
        return {"refined_prompt": prompt, "error": f"{type(exc).__name__}: {exc}"}


# ---------------------------------------------------------------- manifest

@dataclass
class CurationConfig:
    min_aesthetic: float = MIN_AESTHETIC
    min_flow_score: float = MIN_FLOW_SCORE
    min_short_edge: int = MIN_SHORT_EDGE
    zoom_band: tuple = ZOOM_BAND
    static_magnitude: float = STATIC_MAGNITUDE
    filters: tuple = ("validity", "resolution", "camera", "retention")

    def __post_init__(self):
        self.zoom_band = tuple(self.zoom_band)
        self.filters = tuple(self.filters)
        unknown = set(self.filters) - {"validity", "resolution", "camera", "retention"}
        if unknown:
            raise ValidationError(f"unknown filters {sorted(unknown)}")


def score_clip(clip) -> tuple[ClipRecord, dict]:
    diag = camera_motion(clip.flow, clip.masks)
    angle = diag["dominant_angle_deg"]
    rec = ClipRecord(
        clip_id=clip.clip_id,
        dims=clip.dims,
        flow_score=flow_score(clip.flow, clip.masks),
        aesthetic_score=aesthetic_score(clip.frames),
        zoom_fraction=0.5 if math.isnan(diag["zoom_fraction"]) else diag["zoom_fraction"],
        dominant_angle_deg=0.0 if math.isnan(angle) else float(np.mod(angle, 360.0)),
        caption=clip.caption,
    )
    return rec, diag


def curate_records(items, config: CurationConfig, seed=0):
    """Apply filters in ``config.filters`` order to ``(record, flow, masks)`` items.

    Returns ``(kept, rejections)``; the retention draw consumes one random
    number per clip that reaches it.
    """
    rng = np.random.default_rng(seed)
    kept, rejections = [], []
    for rec, flow, masks in sorted(items, key=lambda it: it[0].clip_id):
        reason = None
        for name in config.filters:
            if name == "validity":
                res = validity_filter(rec, config.min_aesthetic, config.min_flow_score)
            elif name == "resolution":
                res = resolution_filter(rec, config.min_short_edge)
            elif name == "camera":
                res = camera_motion_filter(flow, masks, config.zoom_band,
                                           static_magnitude=config.static_magnitude)
            else:
                keep = retention_decision(rec.flow_score, rng)
                res = FilterResult(keep, "" if keep else
                                   f"dropped with keep probability {retention_probability(rec.flow_score):.3f}")
            if not res.passed:
                reason = (name, res.reason)
                break
        if reason is None:
            kept.append(rec)
        else:
            rejections.append({"clip_id": rec.clip_id, "filter": reason[0], "reason": reason[1]})
    return kept, rejections


def bucket_hint(dims):
    L, H, W = dims
    return f"{H}x{W}x{L}"


def build_manifest(corpus_dir, config: CurationConfig | None = None, seed=0, out_dir=None,
                   refiner=None):
    """Score, filter and (optionally) write ``manifest.jsonl``, ``rejections.jsonl``
    and ``summary.json`` into ``out_dir``."""
    from .synthetic import load_clip, read_index

    config = config or CurationConfig()
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise MissingDependencyError(f"corpus directory {corpus_dir} not found")
    index = read_index(corpus_dir)
    items, paths = [], {}
    for entry in index:
        clip = load_clip(corpus_dir, entry)
        rec, _ = score_clip(clip)
        rec.path = entry["path"]
        paths[rec.clip_id] = entry["path"]
        items.append((rec, clip.flow, clip.masks))
    kept, rejections = curate_records(items, config, seed)
    refiner = refiner or EchoRefiner()
    manifest = []
    for rec in kept:
        refined = refine_caption(refiner, rec.caption)
        manifest.append({
            "clip_id": rec.clip_id,
            "path": rec.path,
            "dims": list(rec.dims),
            "scores": {
                "aesthetic": rec.aesthetic_score,
                "flow": rec.flow_score,
                "zoom_fraction": rec.zoom_fraction,
                "dominant_angle_deg": rec.dominant_angle_deg,
            },
            "caption": refined["refined_prompt"],
            "refine_error": refined["error"],
            "bucket_hint": bucket_hint(rec.dims),
        })
    counts = {"total": len(items), "kept": len(kept), "rejected": len(rejections)}
    for name in config.filters:
        counts[f"rejected_{name}"] = sum(r["filter"] == name for r in rejections)
    result = {"manifest": manifest, "rejections": rejections, "summary": counts,
              "config": asdict(config), "seed": seed}
    if out_dir is not None:
        write_manifest(result, out_dir)
    return result


def _jsonl(records):
    return "".join(archive.canonical_json(r) + "\n" for r in records).encode()


def write_manifest(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    archive.atomic_write_bytes(out / "manifest.jsonl", _jsonl(result["manifest"]))
    archive.atomic_write_bytes(out / "rejections.jsonl", _jsonl(result["rejections"]))
    archive.atomic_write_bytes(out / "summary.json", archive.canonical_json(
        {"counts": result["summary"], "config": result["config"], "seed": result["seed"]}).encode())
    return out
