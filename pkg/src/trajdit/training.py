"""Two-stage motion-conditioning curriculum with bucketed batching.

Phases run strictly in order: an all-parameter unconditional ``pretrain``
(standing in for a pretrained video backbone), ``stage1`` on dense flow and
``stage2`` on 1..N sparse object trajectories. Only temporal blocks, fusers
and the trajectory extractor are trained in the two motion stages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import archive
from .backbone import ModelConfig, STDiT
from .diffusion import ConditionMask, DiffusionSchedule, training_loss
from .errors import ValidationError
from .extractor import MotionExtractor, extract_motion_patches
from .motion_vae import MotionVAE
from .trajectory import DEFAULT_SIGMA, Trajectory, dense_flow_map, rasterize_trajectories

PHASES = ("pretrain", "stage1", "stage2")


@dataclass
class CurriculumConfig:
    pretrain_epochs: int = 0
    stage1_epochs: int = 2
    stage2_epochs: int = 1
    max_trajectories: int = 16
    sigma: float = DEFAULT_SIGMA
    unmask_probability: float = 0.0

    def __post_init__(self):
        if self.max_trajectories < 1:
            raise ValidationError("curriculum.max_trajectories must be >= 1")
        if min(self.pretrain_epochs, self.stage1_epochs, self.stage2_epochs) < 0:
            raise ValidationError("epoch counts must be >= 0")
        if not 0.0 <= self.unmask_probability <= 1.0:
            raise ValidationError("curriculum.unmask_probability must be in [0, 1]")
        if self.sigma <= 0:
            raise ValidationError("curriculum.sigma must be > 0")

    def epochs(self, phase):
        return getattr(self, f"{phase}_epochs")


@dataclass(frozen=True)
class Bucket:
    resolution: tuple  # (H, W)
    num_frames: int
    batch_size: int

    @property
    def pixels(self):
        return self.resolution[0] * self.resolution[1]

    @property
    def name(self):
        return f"{self.resolution[0]}x{self.resolution[1]}x{self.num_frames}"


def make_buckets(specs):
    """Build and check a bucket set from ``[{resolution, num_frames, batch_size}]``."""
    buckets = [b if isinstance(b, Bucket) else
               Bucket(tuple(b["resolution"]), int(b["num_frames"]), int(b["batch_size"]))
               for b in specs]
    check_buckets(buckets)
    return buckets


def check_buckets(buckets):
    """Non-empty, positive sizes, and longer clips only at lower resolutions."""
    if not buckets:
        raise ValidationError("bucket set is empty")
    for b in buckets:
        if min(*b.resolution, b.num_frames, b.batch_size) < 1:
            raise ValidationError(f"bucket {b}: sizes must be positive")
    ordered = sorted(buckets, key=lambda b: (-b.pixels, b.num_frames))
    for hi, lo in zip(ordered, ordered[1:]):
        if lo.pixels < hi.pixels and lo.num_frames < hi.num_frames:
            raise ValidationError(
                f"bucket {lo.name} has fewer frames than higher-resolution bucket {hi.name}"
            )


def pixel_interval(bucket, buckets):
    """``[pixels, next larger pixel count)``; the largest bucket is unbounded above."""
    larger = sorted({b.pixels for b in buckets if b.pixels > bucket.pixels})
    return bucket.pixels, (larger[0] if larger else np.inf)


def assign_bucket(dims, buckets):
    """Bucket for a clip ``(H, W, L)``, or ``None`` when no bucket accepts it.

    Among buckets whose pixel interval holds ``H*W``, the one with the most
    frames not exceeding ``L`` wins; the clip is then cut to that length.
    """
    H, W, L = dims
    n = H * W
    fits = []
    for b in buckets:
        lo, hi = pixel_interval(b, buckets)
        if lo <= n < hi and b.num_frames <= L:
            fits.append(b)
    if not fits:
        return None
    return max(fits, key=lambda b: (b.num_frames, -b.batch_size))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def mask_centroids(masks, flow=None):
    """Per-frame centroid ``(L, 2)`` of one object mask ``(L, H, W)``.

    Frames where the mask is empty advect the previous centroid by ``flow``
    sampled at the nearest pixel (or hold it without flow); leading empty
    frames take the first visible centroid.
    """
    masks = np.asarray(masks, dtype=bool)
    L, H, W = masks.shape
    pts = np.full((L, 2), np.nan)
    for i in range(L):
        ys, xs = np.nonzero(masks[i])
        if len(xs):
            pts[i] = xs.mean(), ys.mean()
    seen = np.flatnonzero(~np.isnan(pts[:, 0]))
    if not len(seen):
        raise ValidationError("object mask is empty in every frame")
    pts[: seen[0]] = pts[seen[0]]
    for i in range(seen[0] + 1, L):
        if np.isnan(pts[i, 0]):
            prev = pts[i - 1]
            step = 0.0
            if flow is not None:
                r = int(np.clip(np.floor(prev[1] + 0.5), 0, H - 1))
                c = int(np.clip(np.floor(prev[0] + 0.5), 0, W - 1))
                step = np.asarray(flow[i - 1, r, c], dtype=np.float64)
            pts[i] = prev + step
    pts[:, 0] = np.clip(pts[:, 0], 0, W - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, H - 1)
    return pts


def sample_sparse_trajectories(flow, masks, max_trajectories=16, seed=0, k=None):
    """Pick ``k ~ U{1..min(N, objects)}`` objects and return their centroid tracks."""
    masks = np.asarray(masks, dtype=bool)
    present = [j for j in range(len(masks)) if masks[j].any()]
    if not present:
        raise ValidationError("no object masks to sample trajectories from")
    rng = _rng(seed)
    top = min(max_trajectories, len(present))
    if k is None:
        k = int(rng.integers(1, top + 1))
    elif not 1 <= k <= top:
        raise ValidationError(f"k={k} outside [1, {top}]")
    chosen = sorted(rng.choice(present, size=k, replace=False).tolist())
    return [Trajectory(mask_centroids(masks[j], flow), f"obj{j}") for j in chosen]


def apply_unmask_strategy(num_slices, probability, seed=0, first_slice_probability=0.5,
                          max_tries=100):
    """Draw the set of clean (unmasked) latent slices.

    Later slices are unmasked independently with ``probability``; slice 0 uses
    ``max(probability, first_slice_probability)`` unless ``probability`` is 0.
    Draws that leave nothing masked are redrawn; after ``max_tries`` a random
    slice is forced back to masked.
    """
    if not 0.0 <= probability <= 1.0:
        raise ValidationError("unmask probability must be in [0, 1]")
    rng = _rng(seed)
    if probability == 0.0:
        return ConditionMask(frozenset(), num_slices)
    p = np.full(num_slices, probability)
    p[0] = max(probability, first_slice_probability)
    for _ in range(max_tries):
        draw = rng.random(num_slices) < p
        if not draw.all():
            break
    else:
        draw[int(rng.integers(num_slices))] = False
    return ConditionMask(frozenset(np.flatnonzero(draw).tolist()), num_slices)


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: dict = field(default_factory=dict)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    buckets: list = field(default_factory=lambda: [
        {"resolution": [32, 32], "num_frames": 16, "batch_size": 8}])
    learning_rate: float = 2e-5
    pretrain_learning_rate: float | None = None
    text_dropout: float = 0.1
    max_steps: int | None = None
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.curriculum, dict):
            self.curriculum = CurriculumConfig(**self.curriculum)
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if not 0.0 <= self.text_dropout <= 1.0:
            raise ValidationError("text_dropout must be in [0, 1]")
        make_buckets(self.buckets)
        DiffusionSchedule(**self.schedule)

    def to_dict(self):
        return asdict(self)


@dataclass
class ClipData:
    clip_id: str
    latent: torch.Tensor  # (l, h, w, C) video latent
    caption: str
    flow: np.ndarray | None  # (L, H, W, 2)
    masks: np.ndarray | None  # (K, L, H, W)
    dims: tuple  # (L, H, W)
    dense_levels: list | None = None


def encode_clips(clips, video_vae: MotionVAE, buckets):
    """Video latents for clips that fit a bucket; returns ``(data, rejected_ids)``."""
    data, rejected = [], []
    for clip in clips:
        L, H, W = clip.dims
        bucket = assign_bucket((H, W, L), buckets)
        if bucket is None:
            rejected.append(clip.clip_id)
            continue
        n = bucket.num_frames
        frames = torch.from_numpy(clip.frames[:n].astype(np.float32) / 255.0)
        with torch.no_grad():
            z = video_vae.encode(frames)
        data.append((bucket, ClipData(
            clip.clip_id, z, clip.caption,
            None if clip.flow is None else clip.flow[:n],
            None if clip.masks is None else clip.masks[:, :n],
            (n, H, W),
        )))
    return data, rejected


class Trainer:
    """Owns the denoiser, extractor, optimizer and phase state machine."""

    def __init__(self, config: TrainConfig, motion_vae: MotionVAE, model=None, extractor=None,
                 log_path=None):
        self.config = config
        self.schedule = DiffusionSchedule(**config.schedule)
        self.buckets = make_buckets(config.buckets)
        self.motion_vae = motion_vae.eval()
        for p in self.motion_vae.parameters():
            p.requires_grad_(False)
        mc = config.model
        self.model = model or STDiT(mc, seed=config.seed)
        self.extractor = extractor or MotionExtractor(
            mc.patch_size, mc.latent_channels, mc.motion_dim, mc.num_blocks, seed=config.seed + 1)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.phase_index = 0
        self.step = 0
        self.log_path = Path(log_path) if log_path else None
        self.history = []
        self._set_phase(0)

    # -- phase handling
    @property
    def phase(self):
        return PHASES[self.phase_index] if self.phase_index < len(PHASES) else "done"

    def trainable_parameters(self, phase):
        if phase == "pretrain":
            return [p for n, p in self.model.named_parameters() if ".fuser." not in n]
        params = list(self.model.temporal_parameters()) + list(self.extractor.parameters())
        seen = {id(p) for p in params}
        params += [p for p in self.model.fuser_parameters() if id(p) not in seen]
        return params

    def _set_phase(self, index):
        self.phase_index = index
        if self.phase == "done":
            return
        for p in list(self.model.parameters()) + list(self.extractor.parameters()):
            p.requires_grad_(False)
        params = self.trainable_parameters(self.phase)
        for p in params:
            p.requires_grad_(True)
        lr = self.config.learning_rate
        if self.phase == "pretrain" and self.config.pretrain_learning_rate:
            lr = self.config.pretrain_learning_rate
        self.lr = lr
        self.optimizer = torch.optim.Adam(params, lr=lr)

    def advance(self):
        if self.phase == "done":
            raise ValidationError("curriculum already finished")
        self._set_phase(self.phase_index + 1)

    # -- motion conditions
    def motion_levels(self, maps):
        return extract_motion_patches(np.stack(maps), self.motion_vae, self.extractor)

    def dense_maps(self, batch):
        if any(c.flow is None for c in batch):
            raise ValidationError("stage 1 needs ground-truth dense flow for every clip")
        return [dense_flow_map(c.flow) for c in batch]

    def sparse_maps(self, batch):
        cur = self.config.curriculum
        maps = []
        for c in batch:
            if c.masks is None:
                raise ValidationError("stage 2 needs object masks for every clip")
            trajs = sample_sparse_trajectories(c.flow, c.masks, cur.max_trajectories, self.rng)
            maps.append(rasterize_trajectories(trajs, c.dims, cur.sigma))
        return maps

    # -- steps
    def _loss(self, batch, motion):
        z0 = torch.stack([c.latent for c in batch]).to(self.model.x_embed.weight.dtype)
        text = self.model.embed_text([c.caption for c in batch])
        masks = [apply_unmask_strategy(z0.shape[1], self.config.curriculum.unmask_probability,
                                       self.rng) for _ in batch]
        return training_loss(self.model, z0, text, motion, self.schedule, self.generator,
                             masks=masks, cond_drop=self.config.text_dropout)

    def _update(self, loss):
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return loss.item()

    def pretrain_step(self, batch):
        return self._update(self._loss(batch, None))

    def stage1_step(self, batch):
        return self._update(self._loss(batch, self.motion_levels(self.dense_maps(batch))))

    def stage2_step(self, batch):
        return self._update(self._loss(batch, self.motion_levels(self.sparse_maps(batch))))

    def train_step(self, batch):
        step_fn = {"pretrain": self.pretrain_step, "stage1": self.stage1_step,
                   "stage2": self.stage2_step}.get(self.phase)
        if step_fn is None:
            raise ValidationError("curriculum already finished")
        return step_fn(batch)

    # -- loops
    def epoch_batches(self, data):
        """Shuffle clips within buckets, cut into bucket-sized batches, shuffle batches."""
        by_bucket = {}
        for bucket, clip in data:
            by_bucket.setdefault(bucket, []).append(clip)
        batches = []
        for bucket in sorted(by_bucket, key=lambda b: b.name):
            clips = by_bucket[bucket]
            order = self.rng.permutation(len(clips))
            for i in range(0, len(clips), bucket.batch_size):
                batches.append((bucket, [clips[j] for j in order[i:i + bucket.batch_size]]))
        return [batches[i] for i in self.rng.permutation(len(batches))]

    def _log(self, record):
        self.history.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def run(self, data, checkpoint_path=None):
        """Train through every remaining phase; honours ``max_steps``."""
        if not data:
            raise ValidationError("no training clips fit the bucket set")
        limit = self.config.max_steps
        while self.phase != "done":
            epochs = self.config.curriculum.epochs(self.phase)
            for _ in range(epochs):
                for bucket, batch in self.epoch_batches(data):
                    if limit is not None and self.step >= limit:
                        return self.history
                    loss = self.train_step(batch)
                    self.step += 1
                    self._log({"step": self.step, "stage": self.phase, "loss": loss,
                               "lr": self.lr, "bucket": bucket.name})
                    every = self.config.checkpoint_every
                    if checkpoint_path and every and self.step % every == 0:
                        self.save(checkpoint_path)
            self.advance()
        return self.history

    # -- persistence
    def save(self, path):
        return save_checkpoint(path, self.model, self.extractor, self.config, self.step, self.phase)


def copy_backbone(src: STDiT, dst: STDiT):
    """Copy every non-fuser parameter of ``src`` into ``dst`` (fusers may differ in kind)."""
    state = {k: v for k, v in src.state_dict().items() if ".fuser." not in k}
    missing, unexpected = dst.load_state_dict(state, strict=False)
    if unexpected or any(".fuser." not in k for k in missing):
        raise ValidationError("backbone layouts differ")
    return dst


def save_checkpoint(path, model, extractor, train_config: TrainConfig, step=0, phase="done"):
    arrays = {f"model.{k}": v for k, v in archive.state_dict_to_arrays(model).items()}
    arrays.update({f"extractor.{k}": v for k, v in archive.state_dict_to_arrays(extractor).items()})
    meta = {"kind": "trajdit", "step": step, "phase": phase, "train_config": train_config.to_dict()}
    return archive.save_archive(path, arrays, meta)


def load_checkpoint(path):
    """Return ``(model, extractor, train_config, metadata)``."""
    arrays, meta = archive.load_archive(path)
    if meta.get("kind") != "trajdit":
        raise ValidationError(f"{path} is not a model checkpoint")
    cfg = TrainConfig(**meta["train_config"])
    model = STDiT(cfg.model, seed=cfg.seed)
    mc = cfg.model
    extractor = MotionExtractor(mc.patch_size, mc.latent_channels, mc.motion_dim, mc.num_blocks)
    archive.load_arrays_into(model, arrays, "model.")
    archive.load_arrays_into(extractor, arrays, "extractor.")
    model.eval()
    extractor.eval()
    return model, extractor, cfg, meta
