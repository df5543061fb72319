"""Trajectory extractor: displacement map -> flow visualization -> motion
latent -> multi-level motion patches aligned with the video tokens."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .backbone import patchify
from .errors import DimensionError, ValidationError
from .flowvis import flow_to_rgb
from .motion_vae import MotionVAE


class MotionExtractor(nn.Module):
    """Patch embedding to ``d'`` followed by ``num_levels`` residual conv layers.

    Level ``i`` is ``conv_i(f_{i-1}) + f_{i-1}``; each conv is a width-3,
    zero-padded 1D convolution over the tokens of one temporal slice.
    """

    def __init__(self, patch_size=2, latent_channels=4, motion_dim=32, num_levels=4, seed=0):
        super().__init__()
        if num_levels < 1:
            raise ValidationError("num_levels must be >= 1")
        self.patch_size = patch_size
        self.motion_dim = motion_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Linear(patch_size * patch_size * latent_channels, motion_dim)
            self.convs = nn.ModuleList(
                nn.Conv1d(motion_dim, motion_dim, 3, padding=1) for _ in range(num_levels)
            )

    @property
    def num_levels(self):
        return len(self.convs)

    def embed_latent(self, latent):
        """``(B, l, h, w, C) -> f_0 (B, l, s, d')``."""
        return self.embed(patchify(latent, self.patch_size))

    def forward(self, latent):
        f = self.embed_latent(latent)
        B, l, s, d = f.shape
        levels = []
        for conv in self.convs:
            flat = f.reshape(B * l, s, d).transpose(1, 2)
            f = conv(flat).transpose(1, 2).reshape(B, l, s, d) + f
            levels.append(f)
        return levels


def motion_latent(maps, vae: MotionVAE, max_magnitude=None):
    """Visualize each ``(L, H, W, 2)`` map and encode it with the VAE posterior mean.

    ``maps`` is one map or a batch ``(B, L, H, W, 2)``; returns ``(B, l, h, w, 4)``.
    """
    maps = np.asarray(maps)
    if maps.ndim == 4:
        maps = maps[None]
    rgb = np.stack([flow_to_rgb(m, max_magnitude) for m in maps])
    with torch.no_grad():
        return vae.encode(torch.from_numpy(rgb))


def extract_motion_patches(maps, vae: MotionVAE, extractor: MotionExtractor, num_levels=None,
                           max_magnitude=None):
    """Full extractor pipeline; returns the list of levels ``f_1 .. f_N``."""
    if num_levels is not None and num_levels != extractor.num_levels:
        raise ValidationError(f"extractor has {extractor.num_levels} levels, {num_levels} requested")
    z = motion_latent(maps, vae, max_magnitude)
    p = extractor.patch_size
    if z.shape[2] % p or z.shape[3] % p:
        raise DimensionError("height" if z.shape[2] % p else "width",
                             z.shape[2] if z.shape[2] % p else z.shape[3],
                             f"motion latent not divisible by patch size {p}")
    return extractor(z.to(extractor.embed.weight.dtype))
