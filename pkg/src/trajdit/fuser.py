"""Motion-guidance fusers: inject a motion level ``f (.., l, s, d')`` into a
hidden state ``h (.., l, s, d)``.

Every variant returns ``h`` unchanged at construction because its final
projection starts at zero.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MultiHeadAttention
from .errors import DimensionError, ValidationError

FUSER_KINDS = ("extra_channel", "adaptive_norm", "cross_attention")
PLACEMENTS = ("temporal", "spatial", "both")


def _check(h, f, same_tokens=True):
    if h.shape[:-2] != f.shape[:-2]:
        raise DimensionError("slices", f.shape[-3] if f.ndim > 2 else 0,
                             f"motion {tuple(f.shape)} does not match hidden {tuple(h.shape)}")
    if same_tokens and h.shape[-2] != f.shape[-2]:
        raise DimensionError("tokens", f.shape[-2],
                             f"motion has {f.shape[-2]} tokens per slice, hidden has {h.shape[-2]}")


class ExtraChannelFuser(nn.Module):
    """``h + MLP([h, f])`` with a two-layer SiLU MLP from ``d + d'`` to ``d``."""

    kind = "extra_channel"

    def __init__(self, dim, motion_dim):
        super().__init__()
        self.fc1 = nn.Linear(dim + motion_dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, h, f):
        _check(h, f)
        return self.fc2(F.silu(self.fc1(torch.cat([h, f], dim=-1)))) + h


class AdaptiveNormFuser(nn.Module):
    """``gamma * h + beta + h`` with gamma, beta from two zero-initialized
    pointwise convolutions of ``f``."""

    kind = "adaptive_norm"

    def __init__(self, dim, motion_dim):
        super().__init__()
        self.to_gamma = nn.Conv1d(motion_dim, dim, 1)
        self.to_beta = nn.Conv1d(motion_dim, dim, 1)
        for conv in (self.to_gamma, self.to_beta):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def modulation(self, f):
        lead = f.shape[:-1]
        fc = f.reshape(-1, f.shape[-2], f.shape[-1]).transpose(1, 2)
        gamma = self.to_gamma(fc).transpose(1, 2).reshape(*lead[:-1], lead[-1], -1)
        beta = self.to_beta(fc).transpose(1, 2).reshape(*lead[:-1], lead[-1], -1)
        return gamma, beta

    def forward(self, h, f):
        _check(h, f)
        gamma, beta = self.modulation(f)
        return gamma * h + beta + h


class CrossAttentionFuser(nn.Module):
    """``h + CrossAttn(query=h, key=f, value=f)`` within each temporal slice."""

    kind = "cross_attention"

    def __init__(self, dim, motion_dim, heads=4):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, context_dim=motion_dim, zero_out=True)

    def forward(self, h, f):
        _check(h, f, same_tokens=False)
        return self.attn(h, f) + h


def make_fuser(kind, dim, motion_dim, heads=4):
    if kind == "extra_channel":
        return ExtraChannelFuser(dim, motion_dim)
    if kind == "adaptive_norm":
        return AdaptiveNormFuser(dim, motion_dim)
    if kind == "cross_attention":
        return CrossAttentionFuser(dim, motion_dim, heads)
    raise ValidationError(f"unknown fuser kind {kind!r}; expected one of {FUSER_KINDS}")
