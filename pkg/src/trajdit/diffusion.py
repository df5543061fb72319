"""Forward noising, the noise-prediction loss, classifier-free guidance and
deterministic DDIM sampling with image-condition clamping.

Denoisers are any callable ``model(z_t, t, text, motion) -> eps``; latents are
``(B, l, h, w, C)`` and condition masks act on the slice axis ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ValidationError


@dataclass
class DiffusionSchedule:
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sampler_steps: int = 30
    guidance_scale: float = 7.0
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValidationError("need 0 < beta_start < beta_end < 1")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.num_timesteps, dtype=np.float64)
        # alpha_bar[0] = 1 by convention; alpha_bar[t] for t = 1..T
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])
        if not (np.diff(self.betas) > 0).all() or not (np.diff(self.alpha_bar) < 0).all():
            raise ValidationError("schedule must have increasing beta and decreasing alpha_bar")
        if not 1 <= self.sampler_steps <= self.num_timesteps:
            raise ValidationError(f"sampler_steps must be in [1, {self.num_timesteps}]")
        if self.guidance_scale < 0:
            raise ValidationError("guidance_scale must be >= 0")

    def to_dict(self):
        return {
            "num_timesteps": self.num_timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "sampler_steps": self.sampler_steps,
            "guidance_scale": self.guidance_scale,
        }

    def sampling_timesteps(self, steps=None):
        """Descending, evenly spaced timesteps ending at 1."""
        steps = self.sampler_steps if steps is None else steps
        if not 1 <= steps <= self.num_timesteps:
            raise ValidationError(f"sampler steps {steps} outside [1, {self.num_timesteps}]")
        ts = np.round(np.linspace(1, self.num_timesteps, steps)).astype(np.int64)
        return ts[::-1].copy()


def _expand(values, ndim):
    return values.reshape(-1, *([1] * (ndim - 1)))


def q_sample(z0, t, eps, schedule: DiffusionSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` scalar or per-batch."""
    z0 = torch.as_tensor(z0)
    eps = torch.as_tensor(eps, dtype=z0.dtype)
    if eps.shape != z0.shape:
        raise ValidationError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    t = np.atleast_1d(np.asarray(t))
    if (t < 0).any() or (t > schedule.num_timesteps).any():
        raise ValidationError(f"timestep outside [0, {schedule.num_timesteps}]")
    abar = torch.as_tensor(schedule.alpha_bar[t], dtype=z0.dtype)
    if abar.numel() > 1:
        abar = _expand(abar, z0.ndim)
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


@dataclass
class ConditionMask:
    """Latent slices exempt from noising and supervision."""

    unmasked: frozenset = frozenset()
    num_slices: int = 0

    def __post_init__(self):
        self.unmasked = frozenset(int(i) for i in self.unmasked)
        if any(i < 0 or i >= self.num_slices for i in self.unmasked):
            raise ValidationError(f"unmasked slice outside [0, {self.num_slices})")

    def slice_weights(self):
        w = np.ones(self.num_slices)
        w[list(self.unmasked)] = 0.0
        return w


def training_loss(model, z0, text, motion, schedule: DiffusionSchedule, generator,
                  masks=None, cond_drop=0.0):
    """Noise-prediction MSE averaged over the noised (masked) slices.

    ``masks`` is one :class:`ConditionMask` per batch item (or None); unmasked
    slices are fed clean and excluded from the loss. With ``cond_drop > 0`` the
    text condition of each item is zeroed with that probability.
    """
    z0 = torch.as_tensor(z0)
    B, l = z0.shape[:2]
    keep = torch.ones(B, l, dtype=z0.dtype)
    if masks is not None:
        for b, m in enumerate(masks):
            keep[b] = torch.as_tensor(m.slice_weights(), dtype=z0.dtype)
    if (keep.sum(dim=1) == 0).any():
        raise ValidationError("a sample has every slice unmasked; nothing to supervise")
    t = torch.randint(1, schedule.num_timesteps + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    keep5 = keep[:, :, None, None, None]
    eps = eps * keep5
    z_t = q_sample(z0, t.numpy(), eps, schedule)
    z_t = keep5 * z_t + (1 - keep5) * z0
    if cond_drop > 0:
        drop = torch.rand(B, generator=generator) < cond_drop
        if drop.any():
            # an all-zero sequence attends exactly like the single null token
            text = torch.where(drop[:, None, None], torch.zeros_like(text), text)
    pred = model(z_t, t, text, motion)
    sq = (eps - pred) ** 2 * keep5
    return sq.sum() / (keep5.expand_as(sq).sum())


def cfg_denoise(model, z_t, t, text, motion, guidance_scale, null_text=None):
    """``eps_u + scale (eps_c - eps_u)``; motion conditioning stays in both branches."""
    if guidance_scale < 0:
        raise ValidationError("guidance_scale must be >= 0")
    if guidance_scale == 1:
        return model(z_t, t, text, motion)
    if null_text is None:
        null_text = torch.zeros_like(text[:, :1])
    eps_u = model(z_t, t, null_text, motion)
    if guidance_scale == 0:
        return eps_u
    eps_c = model(z_t, t, text, motion)
    return eps_u + guidance_scale * (eps_c - eps_u)


def ddim_step(z, eps, abar_t, abar_prev):
    x0 = (z - np.sqrt(1 - abar_t) * eps) / np.sqrt(abar_t)
    return np.sqrt(abar_prev) * x0 + np.sqrt(1 - abar_prev) * eps


@torch.no_grad()
def sample(model, shape, text, motion, schedule: DiffusionSchedule, seed=0, steps=None,
           guidance_scale=None, mask: ConditionMask | None = None, clamp=None, null_text=None):
    """Deterministic DDIM (eta = 0) from seeded Gaussian noise.

    ``clamp`` holds clean latents; after initialization and every step the
    slices in ``mask.unmasked`` are overwritten with it.
    """
    scale = schedule.guidance_scale if guidance_scale is None else guidance_scale
    ts = schedule.sampling_timesteps(steps)
    gen = torch.Generator().manual_seed(seed)
    dtype = text.dtype
    z = torch.randn(shape, generator=gen, dtype=dtype)
    fixed = sorted(mask.unmasked) if mask is not None else []
    if fixed:
        clamp = torch.as_tensor(clamp, dtype=dtype)
        z[:, fixed] = clamp[:, fixed]
    for i, t in enumerate(ts):
        abar_t = schedule.alpha_bar[t]
        abar_prev = schedule.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        tt = torch.full((shape[0],), int(t), dtype=torch.long)
        eps = cfg_denoise(model, z, tt, text, motion, scale, null_text)
        z = ddim_step(z, eps, abar_t, abar_prev)
        if fixed:
            z[:, fixed] = clamp[:, fixed]
    return z
