"""Spatial-temporal diffusion transformer (ST-DiT).

Latents ``(B, l, h, w, C)`` are cut into ``p x p`` patches per temporal slice,
giving tokens ``(B, l, s, d)`` with ``s = h*w/p^2``. Blocks alternate between
spatial attention (over the ``s`` tokens of a slice) and temporal attention
(over the ``l`` slices at one spatial index); both follow self-attention with
text cross-attention and a feed-forward layer, each on a residual branch.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MultiHeadAttention
from .errors import DimensionError, ValidationError
from .fuser import FUSER_KINDS, PLACEMENTS, make_fuser


@dataclass
class ModelConfig:
    hidden_size: int = 64
    heads: int = 4
    num_blocks: int = 4
    patch_size: int = 2
    motion_dim: int | None = None  # d'; defaults to hidden_size // 2
    vocab_size: int = 1024
    max_text_tokens: int = 16
    latent_channels: int = 4
    mlp_ratio: int = 4
    fuser_kind: str = "adaptive_norm"
    fuser_placement: str = "temporal"
    use_pos_embed: bool = True
    num_timesteps: int = 1000
    zero_init_residual: bool = True

    def __post_init__(self):
        if self.motion_dim is None:
            self.motion_dim = self.hidden_size // 2
        if self.num_blocks < 2 or self.num_blocks % 2:
            raise ValidationError("num_blocks must be even (equal spatial and temporal blocks)")
        if self.fuser_kind not in FUSER_KINDS:
            raise ValidationError(f"fuser.kind must be one of {FUSER_KINDS}")
        if self.fuser_placement not in PLACEMENTS:
            raise ValidationError(f"fuser.placement must be one of {PLACEMENTS}")

    def to_dict(self):
        return asdict(self)


def patchify(z, p):
    """``(B, l, h, w, C) -> (B, l, s, p*p*C)``; row-major patches, ``(py, px, C)``
    order inside a patch."""
    B, l, h, w, C = z.shape
    if h % p:
        raise DimensionError("height", h, f"latent height not divisible by patch size {p}")
    if w % p:
        raise DimensionError("width", w, f"latent width not divisible by patch size {p}")
    z = z.reshape(B, l, h // p, p, w // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
    return z.reshape(B, l, (h // p) * (w // p), p * p * C)


def unpatchify(x, p, h, w):
    """Inverse of :func:`patchify` for ``x (B, l, s, p*p*C)``."""
    B, l, s, n = x.shape
    if h % p or w % p or s != (h // p) * (w // p) or n % (p * p):
        raise DimensionError("tokens", s, f"cannot unpatchify to {h}x{w} with patch size {p}")
    C = n // (p * p)
    x = x.reshape(B, l, h // p, w // p, p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, l, h, w, C)


def sinusoidal(positions, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def pos_embed_2d(rows, cols, dim):
    """Fixed sin-cos embedding of ``(row, col)`` for ``rows*cols`` tokens."""
    r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    return torch.cat([sinusoidal(r.reshape(-1), dim // 2), sinusoidal(c.reshape(-1), dim - dim // 2)], -1)


class TextEmbedder(nn.Module):
    """Hashes whitespace tokens into a learned table (id 0 is padding)."""

    def __init__(self, vocab_size, dim, max_tokens=16):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.table = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.table.weight, std=0.02)

    def token_ids(self, text):
        words = text.lower().split()[: self.max_tokens] or ["<empty>"]
        ids = [1 + zlib.crc32(w.encode()) % (self.vocab_size - 1) for w in words]
        return ids + [0] * (self.max_tokens - len(ids))

    def forward(self, texts):
        if isinstance(texts, str):
            texts = [texts]
        ids = torch.tensor([self.token_ids(t) for t in texts], dtype=torch.long)
        return self.table(ids)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim, freq_dim=256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        emb = sinusoidal(t, self.freq_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class STBlock(nn.Module):
    """One spatial or temporal DiT block, optionally with a motion fuser at its entry."""

    def __init__(self, cfg: ModelConfig, temporal: bool, fuse: bool):
        super().__init__()
        d = cfg.hidden_size
        self.temporal = temporal
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.attn = MultiHeadAttention(d, cfg.heads, zero_out=cfg.zero_init_residual)
        self.norm2 = nn.LayerNorm(d, eps=1e-6)
        self.cross = MultiHeadAttention(d, cfg.heads, context_dim=d, zero_out=cfg.zero_init_residual)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(approximate="tanh"), nn.Linear(cfg.mlp_ratio * d, d)
        )
        if cfg.zero_init_residual:
            nn.init.zeros_(self.mlp[-1].weight)
            nn.init.zeros_(self.mlp[-1].bias)
        self.ada = nn.Linear(d, 4 * d)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)
        self.fuser = make_fuser(cfg.fuser_kind, d, cfg.motion_dim, cfg.heads) if fuse else None

    def forward(self, x, text, c, motion=None):
        """``x (B, l, s, d)``, ``text (B, T, d)``, ``c (B, d)``, ``motion (B, l, s, d')``."""
        if motion is not None:
            if self.fuser is None:
                raise ValidationError("motion supplied to a block without a fuser")
            x = self.fuser(x, motion)
        shift1, scale1, shift2, scale2 = self.ada(F.silu(c))[:, None, None].chunk(4, dim=-1)
        if self.temporal:
            x = x.transpose(1, 2)
        x = x + self.attn(modulate(self.norm1(x), shift1, scale1))
        x = x + self.cross(self.norm2(x), text[:, None])
        x = x + self.mlp(modulate(self.norm3(x), shift2, scale2))
        if self.temporal:
            x = x.transpose(1, 2)
        return x


def spatial_block(tokens, text, t_emb, block: STBlock, motion=None):
    if block.temporal:
        raise ValidationError("expected a spatial block")
    return block(tokens, text, t_emb, motion)


def temporal_block(tokens, text, t_emb, block: STBlock, motion=None):
    if not block.temporal:
        raise ValidationError("expected a temporal block")
    return block(tokens, text, t_emb, motion)


class STDiT(nn.Module):
    """Noise predictor ``eps(z_t, t, text, motion)``."""

    def __init__(self, cfg: ModelConfig | None = None, seed=0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d, p, C = cfg.hidden_size, cfg.patch_size, cfg.latent_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.x_embed = nn.Linear(p * p * C, d)
            self.t_embed = TimestepEmbedder(d)
            self.text_embed = TextEmbedder(cfg.vocab_size, d, cfg.max_text_tokens)
            self.blocks = nn.ModuleList(
                STBlock(cfg, temporal=(i % 2 == 1), fuse=self.is_fusion_site(i))
                for i in range(cfg.num_blocks)
            )
            self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
            self.final_ada = nn.Linear(d, 2 * d)
            self.final = nn.Linear(d, p * p * C)
        for layer in (self.final_ada, self.final):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def is_fusion_site(self, index):
        """Blocks are 0-indexed here; odd indices are temporal."""
        temporal = index % 2 == 1
        placement = self.cfg.fuser_placement
        return placement == "both" or (placement == "temporal") == temporal

    def temporal_parameters(self):
        return [p for b in self.blocks if b.temporal for p in b.parameters()]

    def fuser_parameters(self):
        return [p for b in self.blocks if b.fuser is not None for p in b.fuser.parameters()]

    def null_text(self, batch):
        return torch.zeros(batch, 1, self.cfg.hidden_size, dtype=self.x_embed.weight.dtype)

    def embed_text(self, texts):
        return self.text_embed(texts)

    def tokens(self, z):
        """Patch-embedded tokens plus positional embeddings."""
        x = self.x_embed(patchify(z, self.cfg.patch_size))
        if self.cfg.use_pos_embed:
            l, s = x.shape[1], x.shape[2]
            p = self.cfg.patch_size
            d = self.cfg.hidden_size
            spatial = pos_embed_2d(z.shape[2] // p, z.shape[3] // p, d).to(x.dtype)
            temporal = sinusoidal(torch.arange(l), d).to(x.dtype)
            x = x + spatial[None, None] + temporal[None, :, None]
        return x

    def _check_inputs(self, z, t, motion):
        if z.ndim != 5 or z.shape[-1] != self.cfg.latent_channels:
            raise DimensionError("channels", z.shape[-1], "latent must be (B, l, h, w, C)")
        if (t < 0).any() or (t > self.cfg.num_timesteps).any():
            raise ValidationError(f"timestep outside [0, {self.cfg.num_timesteps}]")
        if motion is not None and len(motion) != self.cfg.num_blocks:
            raise ValidationError(
                f"got {len(motion)} motion levels, model has {self.cfg.num_blocks} blocks"
            )

    def run_blocks(self, x, t, text, motion=None):
        c = self.t_embed(t)
        for i, block in enumerate(self.blocks):
            level = motion[i] if motion is not None and block.fuser is not None else None
            x = block(x, text, c, level)
        return x, c

    def forward(self, z_t, t, text, motion=None):
        z_t = torch.as_tensor(z_t, dtype=self.x_embed.weight.dtype)
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        self._check_inputs(z_t, t, motion)
        x, c = self.run_blocks(self.tokens(z_t), t, text, motion)
        shift, scale = self.final_ada(F.silu(c))[:, None, None].chunk(2, dim=-1)
        out = self.final(modulate(self.final_norm(x), shift, scale))
        return unpatchify(out, self.cfg.patch_size, z_t.shape[2], z_t.shape[3])


def denoise(z_t, t, text, motion, model: STDiT):
    return model(z_t, t, text, motion)
