"""3D convolutional VAE with a fixed 4x temporal / 8x spatial compression.

Volumes are channel-last, ``(..., L, H, W, C)``; latents are ``(..., l, h, w, 4)``
with ``l = L/4, h = H/8, w = W/8``. The same network class serves as the motion
VAE (on flow visualizations) and as the video VAE (on RGB frames).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import archive
from .errors import DimensionError, NonFiniteError, ValidationError

logger = logging.getLogger(__name__)

SPATIAL_FACTOR = 8
TEMPORAL_FACTOR = 4


def check_volume(x, channels=3):
    """Raise unless ``x`` is a legal ``(..., L, H, W, C)`` encoder input."""
    if x.ndim < 4:
        raise DimensionError("rank", x.ndim, "expected (..., frames, height, width, channels)")
    L, H, W, C = x.shape[-4:]
    if C != channels:
        raise DimensionError("channels", C, f"expected {channels}")
    if L < TEMPORAL_FACTOR or L % TEMPORAL_FACTOR:
        raise DimensionError("frames", L, f"must be a positive multiple of {TEMPORAL_FACTOR}")
    if H % SPATIAL_FACTOR or H == 0:
        raise DimensionError("height", H, f"must be a positive multiple of {SPATIAL_FACTOR}")
    if W % SPATIAL_FACTOR or W == 0:
        raise DimensionError("width", W, f"must be a positive multiple of {SPATIAL_FACTOR}")
    if not torch.isfinite(torch.as_tensor(x)).all():
        raise NonFiniteError("volume contains non-finite values")


def latent_shape(L, H, W, latent_channels=4):
    return (L // TEMPORAL_FACTOR, H // SPATIAL_FACTOR, W // SPATIAL_FACTOR, latent_channels)


def _norm(channels):
    # at least two channels per group so a 1x1x1 latent volume still normalizes
    groups = next((g for g in (8, 4, 2) if channels % g == 0 and channels // g >= 2), 1)
    return nn.GroupNorm(groups, channels)


class ResBlock3d(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        return x + self.conv2(F.silu(self.norm2(h)))


class Encoder3d(nn.Module):
    def __init__(self, channels, latent_channels):
        super().__init__()
        c0, c1, c2 = channels
        self.down1 = nn.Conv3d(3, c0, 3, stride=(1, 2, 2), padding=1)
        self.down2 = nn.Conv3d(c0, c1, 3, stride=(2, 2, 2), padding=1)
        self.res2 = ResBlock3d(c1)
        self.down3 = nn.Conv3d(c1, c2, 3, stride=(2, 2, 2), padding=1)
        self.res3 = ResBlock3d(c2)
        self.norm = _norm(c2)
        self.out = nn.Conv3d(c2, 2 * latent_channels, 1)

    def forward(self, x):
        x = self.down1(2.0 * x - 1.0)
        x = self.res2(self.down2(F.silu(x)))
        x = self.res3(self.down3(F.silu(x)))
        return self.out(F.silu(self.norm(x)))


class Decoder3d(nn.Module):
    """Mirror of the encoder; returns unbounded values centred on [0, 1]."""

    def __init__(self, channels, latent_channels):
        super().__init__()
        c0, c1, c2 = channels
        self.inp = nn.Conv3d(latent_channels, c2, 3, padding=1)
        self.res3 = ResBlock3d(c2)
        self.norm3 = _norm(c2)
        self.up3 = nn.Conv3d(c2, c1, 3, padding=1)
        self.res2 = ResBlock3d(c1)
        self.norm2 = _norm(c1)
        self.up2 = nn.Conv3d(c1, c0, 3, padding=1)
        self.up1 = nn.Conv3d(c0, c0, 3, padding=1)
        self.out = nn.Conv3d(c0, 3, 3, padding=1)

    def forward(self, z):
        x = self.res3(self.inp(z))
        x = self.up3(F.interpolate(F.silu(self.norm3(x)), scale_factor=(2, 2, 2), mode="nearest"))
        x = self.res2(x)
        x = self.up2(F.interpolate(F.silu(self.norm2(x)), scale_factor=(2, 2, 2), mode="nearest"))
        x = self.up1(F.interpolate(F.silu(x), scale_factor=(1, 2, 2), mode="nearest"))
        return 0.5 * (self.out(F.silu(x)) + 1.0)


class MotionVAE(nn.Module):
    """Continuous-posterior 3D VAE.

    Inputs in [0, 1] are shifted to [-1, 1] inside the encoder. The decoder
    head is linear; ``decode`` clamps to [0, 1] unless ``clamp=False`` (the
    training loss uses the raw output so gradients never vanish at the bounds).
    """

    spatial_factor = SPATIAL_FACTOR
    temporal_factor = TEMPORAL_FACTOR

    def __init__(self, latent_channels=4, channels=(16, 64, 64), kl_weight=1e-6, seed=0):
        super().__init__()
        if kl_weight < 0:
            raise ValidationError("kl_weight must be >= 0")
        self.latent_channels = latent_channels
        self.channels = tuple(channels)
        self.kl_weight = float(kl_weight)
        # default PyTorch init, drawn from a private seeded stream
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder3d(self.channels, latent_channels)
            self.decoder = Decoder3d(self.channels, latent_channels)

    def config(self):
        return {
            "latent_channels": self.latent_channels,
            "channels": list(self.channels),
            "kl_weight": self.kl_weight,
            "spatial_factor": self.spatial_factor,
            "temporal_factor": self.temporal_factor,
        }

    def _param_dtype(self):
        return next(self.parameters()).dtype

    def moments(self, x):
        """Posterior mean and log-variance for channel-last volumes."""
        x = torch.as_tensor(x, dtype=self._param_dtype())
        check_volume(x)
        lead = x.shape[:-4]
        xb = x.reshape(-1, *x.shape[-4:]).permute(0, 4, 1, 2, 3)
        stats = self.encoder(xb).permute(0, 2, 3, 4, 1)
        mean, logvar = stats.chunk(2, dim=-1)
        logvar = logvar.clamp(-30.0, 20.0)
        return mean.reshape(*lead, *mean.shape[1:]), logvar.reshape(*lead, *logvar.shape[1:])

    def encode(self, x, sample=False, seed=None):
        mean, logvar = self.moments(x)
        if not sample:
            return mean
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        eps = torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
        return mean + torch.exp(0.5 * logvar) * eps

    def decode(self, z, clamp=True):
        z = torch.as_tensor(z, dtype=self._param_dtype())
        if z.ndim < 4 or z.shape[-1] != self.latent_channels:
            raise DimensionError("channels", z.shape[-1] if z.ndim else 0,
                                 f"latent must be (..., l, h, w, {self.latent_channels})")
        if not torch.isfinite(z).all():
            raise NonFiniteError("latent contains non-finite values")
        lead = z.shape[:-4]
        zb = z.reshape(-1, *z.shape[-4:]).permute(0, 4, 1, 2, 3)
        out = self.decoder(zb).permute(0, 2, 3, 4, 1)
        if clamp:
            out = out.clamp(0.0, 1.0)
        return out.reshape(*lead, *out.shape[1:])


def vae_encode(x, vae: MotionVAE, sample=False, seed=None):
    return vae.encode(x, sample=sample, seed=seed)


def vae_decode(z, vae: MotionVAE):
    return vae.decode(z)


def vae_loss(x, vae: MotionVAE, seed=0):
    """Return ``(total, recon, kl)``; recon is the mean squared error of the
    reconstruction from a posterior sample drawn with ``seed``."""
    x = torch.as_tensor(x, dtype=vae._param_dtype())
    mean, logvar = vae.moments(x)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
    z = mean + torch.exp(0.5 * logvar) * eps
    recon = ((vae.decode(z, clamp=False) - x) ** 2).mean()
    kl = 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar).mean()
    return recon + vae.kl_weight * kl, recon, kl


@dataclass
class VaeTrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 1
    max_frames: int = 32
    lr_schedule: str = "cosine"  # or "constant"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError("lr_schedule must be 'cosine' or 'constant'")


@dataclass
class VaeTrainResult:
    vae: MotionVAE
    losses: list = field(default_factory=list)
    config: VaeTrainConfig | None = None


def legal_frame_counts(max_frames, clip_frames):
    top = min(max_frames, clip_frames) // TEMPORAL_FACTOR * TEMPORAL_FACTOR
    return list(range(TEMPORAL_FACTOR, top + 1, TEMPORAL_FACTOR))


def train_vae(corpus, config: VaeTrainConfig, vae: MotionVAE | None = None, log=None):
    """Fit ``vae`` (a fresh one if omitted) on channel-last clips in ``corpus``.

    Each step draws ``batch_size`` clips, a frame count uniformly from the legal
    values ``{4, 8, ...} <= max_frames`` and a random temporal crop. ``log`` is
    called with ``(step, total, recon, kl)`` every ``log_every`` steps.
    """
    if len(corpus) == 0:
        raise ValidationError("empty corpus")
    if config.max_frames < TEMPORAL_FACTOR:
        raise ValidationError(f"max_frames must be >= {TEMPORAL_FACTOR}")
    clips = [np.asarray(c, dtype=np.float32) for c in corpus]
    for c in clips:
        check_volume(torch.from_numpy(c[: TEMPORAL_FACTOR]))
    if config.batch_size > 1 and len({c.shape[1:] for c in clips}) > 1:
        raise ValidationError("batch_size > 1 needs equal spatial dims across the corpus")
    if vae is None:
        vae = MotionVAE(seed=config.seed)
    result = VaeTrainResult(vae=vae, config=config)
    if config.steps == 0:
        return result

    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(vae.parameters(), lr=config.learning_rate)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.steps)
             if config.lr_schedule == "cosine" else None)
    vae.train()
    for step in range(config.steps):
        idx = rng.integers(0, len(clips), size=config.batch_size)
        shortest = min(clips[i].shape[0] for i in idx)
        counts = legal_frame_counts(config.max_frames, shortest)
        if not counts:
            raise ValidationError("a clip has fewer than 4 frames")
        n = counts[rng.integers(0, len(counts))]
        batch = []
        for i in idx:
            start = rng.integers(0, clips[i].shape[0] - n + 1)
            batch.append(clips[i][start:start + n])
        x = torch.from_numpy(np.stack(batch))
        total, recon, kl = vae_loss(x, vae, seed=config.seed * 1_000_003 + step)
        opt.zero_grad()
        total.backward()
        opt.step()
        if sched is not None:
            sched.step()
        rec = (step, total.item(), recon.item(), kl.item())
        result.losses.append(rec[1])
        if log is not None and (step % config.log_every == 0 or step == config.steps - 1):
            log(*rec)
    vae.eval()
    return result


def save_vae(path, vae: MotionVAE, training_config=None, extra=None):
    meta = vae.config()
    meta["training_config"] = asdict(training_config) if training_config is not None else None
    meta["kind"] = "vae3d"
    if extra:
        meta.update(extra)
    return archive.save_archive(path, archive.state_dict_to_arrays(vae), meta)


def load_vae(path) -> MotionVAE:
    arrays, meta = archive.load_archive(path)
    if meta.get("spatial_factor") != SPATIAL_FACTOR or meta.get("temporal_factor") != TEMPORAL_FACTOR:
        raise ValidationError(f"{path}: compression factors do not match 8x spatial / 4x temporal")
    vae = MotionVAE(meta["latent_channels"], meta["channels"], meta["kl_weight"])
    archive.load_arrays_into(vae, arrays)
    vae.eval()
    return vae

