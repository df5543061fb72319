"""Trajectory-conditioned generation and held-out TrajError evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone import STDiT
from .diffusion import ConditionMask, DiffusionSchedule, sample
from .errors import ValidationError
from .evaluation import track_centroid, trajectory_error
from .extractor import MotionExtractor, extract_motion_patches
from .motion_vae import MotionVAE, check_volume, latent_shape
from .trajectory import rasterize_trajectories


@dataclass
class Generator:
    model: STDiT
    extractor: MotionExtractor
    motion_vae: MotionVAE
    video_vae: MotionVAE
    schedule: DiffusionSchedule
    sigma: float = 3.0

    def motion_levels(self, trajectories, dims):
        if not trajectories:
            return None
        for t in trajectories:
            t.validate(dims)
        g = rasterize_trajectories(trajectories, dims, self.sigma)
        return extract_motion_patches(g, self.motion_vae, self.extractor)

    @torch.no_grad()
    def latents(self, caption, dims, trajectories=None, seed=0, steps=None, guidance_scale=None,
                first_frame=None):
        """Sample a video latent ``(1, l, h, w, C)``.

        ``first_frame`` (``(H, W, 3)`` in [0, 1]) turns on image conditioning:
        the first latent slice is clamped to its encoding.
        """
        L, H, W = dims
        check_volume(torch.zeros(1, L, H, W, 3))
        shape = (1, *latent_shape(L, H, W, self.model.cfg.latent_channels))
        text = self.model.embed_text([caption])
        motion = self.motion_levels(trajectories, dims)
        mask, clamp = None, None
        if first_frame is not None:
            clip = np.repeat(np.asarray(first_frame, dtype=np.float32)[None], L, axis=0)
            clamp = self.video_vae.encode(torch.from_numpy(clip)[None]).to(text.dtype)
            mask = ConditionMask(frozenset({0}), shape[1])
        return sample(self.model, shape, text, motion, self.schedule, seed=seed, steps=steps,
                      guidance_scale=guidance_scale, mask=mask, clamp=clamp,
                      null_text=self.model.null_text(1))

    @torch.no_grad()
    def video(self, caption, dims, trajectories=None, seed=0, **kw):
        z = self.latents(caption, dims, trajectories, seed, **kw)
        return z, self.video_vae.decode(z).clamp(0, 1)[0].numpy()


def heldout_errors(gen: Generator, cases, seed=0, steps=None, guidance_scale=None,
                   background_level=0.2):
    """TrajError per case, conditioned and unconditioned, from one checkpoint.

    Each case is ``(trajectory, caption, dims)``; both branches share the seed
    and caption so only the motion condition differs.
    """
    if not cases:
        raise ValidationError("no evaluation cases")
    cond, uncond = [], []
    for i, (traj, caption, dims) in enumerate(cases):
        for trajs, out in (([traj], cond), (None, uncond)):
            _, video = gen.video(caption, dims, trajs, seed=seed + i, steps=steps,
                                 guidance_scale=guidance_scale)
            tracked = track_centroid(video, background_level)
            out.append(trajectory_error(traj, tracked))
    return np.array(cond), np.array(uncond)
