"""Synthetic moving-shape clips with exact flow, masks and captions.

Objects move on integer pixel positions (their float paths are rounded before
drawing), so the stored forward flow exactly advects every object mask from
one frame to the next.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from .errors import MissingDependencyError, ValidationError

COLORS = {
    "white": (255, 255, 255),
    "red": (255, 64, 64),
    "green": (64, 255, 64),
    "blue": (80, 120, 255),
    "yellow": (255, 240, 64),
}


@dataclass
class CorpusConfig:
    num_clips: int = 200
    num_frames: int = 16
    height: int = 32
    width: int = 32
    objects_min: int = 1
    objects_max: int = 1
    shapes: tuple = ("square",)
    colors: tuple = ("white",)
    size_range: tuple = (6, 8)
    speed_range: tuple = (1.0, 2.5)
    turn_range: tuple = (-0.15, 0.15)  # radians per frame
    background_pan: tuple = (0, 0)
    background_level: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("shapes", "colors", "size_range", "speed_range", "turn_range", "background_pan"):
            setattr(self, name, tuple(getattr(self, name)))
        unknown = set(self.colors) - set(COLORS)
        if unknown:
            raise ValidationError(f"unknown colors {sorted(unknown)}")
        if set(self.shapes) - {"square", "circle"}:
            raise ValidationError("shapes must be 'square' or 'circle'")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValidationError("need 1 <= objects_min <= objects_max")
        if self.size_range[1] >= min(self.height, self.width):
            raise ValidationError("objects must be smaller than the frame")


@dataclass
class Clip:
    clip_id: str
    frames: np.ndarray  # (L, H, W, 3) uint8
    flow: np.ndarray  # (L, H, W, 2) float32, frame i -> i+1; last frame zero
    masks: np.ndarray  # (K, L, H, W) bool, amodal, one per object
    caption: str
    objects: list = field(default_factory=list)

    @property
    def dims(self):
        return tuple(self.frames.shape[:3])

    def meta(self):
        return {
            "clip_id": self.clip_id,
            "dims": list(self.dims),
            "caption": self.caption,
            "objects": self.objects,
        }


def direction_words(dx, dy, eps=0.25):
    horiz = "right" if dx > eps else "left" if dx < -eps else ""
    vert = "down" if dy > eps else "up" if dy < -eps else ""
    if horiz and vert:
        return f"{vert} and {horiz}"
    return horiz or vert or "in place"


def object_path(rng, cfg: CorpusConfig, size):
    """Float top-left positions ``(L, 2)`` bouncing inside the frame."""
    L, H, W = cfg.num_frames, cfg.height, cfg.width
    hi = np.array([W - size, H - size], dtype=np.float64)
    pos = rng.uniform(0, hi)
    speed = rng.uniform(*cfg.speed_range)
    heading = rng.uniform(0, 2 * np.pi)
    turn = rng.uniform(*cfg.turn_range)
    path = [pos.copy()]
    for _ in range(L - 1):
        vel = speed * np.array([np.cos(heading), np.sin(heading)])
        nxt = pos + vel
        for a in range(2):
            if nxt[a] < 0 or nxt[a] > hi[a]:
                vel[a] = -vel[a]
                nxt[a] = np.clip(pos[a] + vel[a], 0, hi[a])
        heading = np.arctan2(vel[1], vel[0]) + turn
        pos = nxt
        path.append(pos.copy())
    return np.array(path)


def shape_mask(shape, size, top_left, H, W):
    m = np.zeros((H, W), dtype=bool)
    x0, y0 = int(top_left[0]), int(top_left[1])
    if shape == "square":
        m[y0:y0 + size, x0:x0 + size] = True
    else:
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[:size, :size]
        disk = (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2
        m[y0:y0 + size, x0:x0 + size] = disk
    return m


def render_clip(rng, cfg: CorpusConfig, clip_id) -> Clip:
    L, H, W = cfg.num_frames, cfg.height, cfg.width
    k = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    pan = np.asarray(cfg.background_pan, dtype=np.int64)
    if cfg.background_level > 0 or pan.any():
        texture = rng.integers(0, max(cfg.background_level, 1) + 1, size=(H, W)).astype(np.uint8)
    else:
        texture = np.zeros((H, W), dtype=np.uint8)

    frames = np.zeros((L, H, W, 3), dtype=np.uint8)
    flow = np.zeros((L, H, W, 2), dtype=np.float32)
    for i in range(L):
        bg = np.roll(texture, shift=(int(pan[1]) * i, int(pan[0]) * i), axis=(0, 1))
        frames[i] = bg[..., None]
        if i < L - 1:
            flow[i, ...] = pan.astype(np.float32)

    masks = np.zeros((k, L, H, W), dtype=bool)
    objects = []
    for j in range(k):
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        color = cfg.colors[int(rng.integers(len(cfg.colors)))]
        size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        corners = np.floor(object_path(rng, cfg, size) + 0.5).astype(np.int64)
        for i in range(L):
            m = shape_mask(shape, size, corners[i], H, W)
            masks[j, i] = m
            frames[i][m] = COLORS[color]
            if i < L - 1:
                flow[i][m] = corners[i + 1] - corners[i]
        centers = corners + (size - 1) / 2.0
        objects.append({
            "object_id": f"obj{j}",
            "shape": shape,
            "color": color,
            "size": size,
            "track": centers.tolist(),
        })
    d = np.asarray(objects[0]["track"][-1]) - np.asarray(objects[0]["track"][0])
    caption = f"a {objects[0]['color']} {objects[0]['shape']} moving {direction_words(*d / L)}"
    if k > 1:
        caption += f" with {k - 1} other object" + ("s" if k > 2 else "")
    return Clip(clip_id, frames, flow, masks, caption, objects)


def generate_corpus(cfg: CorpusConfig, prefix="clip"):
    rng = np.random.default_rng(cfg.seed)
    return [render_clip(rng, cfg, f"{prefix}{i:05d}") for i in range(cfg.num_clips)]


def write_corpus(clips, out_dir, cfg: CorpusConfig | None = None):
    """``index.jsonl`` plus one archive per clip under ``clips/``."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    lines = []
    for clip in clips:
        rel = f"clips/{clip.clip_id}.npz"
        archive.save_archive(
            out / rel,
            {"frames": clip.frames, "flow": clip.flow, "masks": clip.masks},
            {"kind": "clip", **clip.meta()},
        )
        lines.append(archive.canonical_json({**clip.meta(), "path": rel}))
    archive.atomic_write_bytes(out / "index.jsonl", ("\n".join(lines) + ("\n" if lines else "")).encode())
    if cfg is not None:
        archive.atomic_write_bytes(out / "corpus_config.json", archive.canonical_json(asdict(cfg)).encode())
    return out


def read_index(corpus_dir):
    path = Path(corpus_dir) / "index.jsonl"
    if not path.exists():
        raise MissingDependencyError(f"{corpus_dir}: no index.jsonl (run gen-corpus first)")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_clip(corpus_dir, record) -> Clip:
    arrays, meta = archive.load_archive(Path(corpus_dir) / record["path"])
    return Clip(meta["clip_id"], arrays["frames"], arrays["flow"], arrays["masks"],
                meta["caption"], meta["objects"])


def read_corpus(corpus_dir):
    return [load_clip(corpus_dir, r) for r in read_index(corpus_dir)]


def frames_float(clip: Clip):
    return clip.frames.astype(np.float32) / 255.0
