"""Multi-head scaled dot-product attention."""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import DimensionError


def scaled_dot_product(q, k, v):
    """``softmax(q k^T / sqrt(d_head)) v`` over the second-to-last axis.

    Shapes: ``q (..., n_q, d_head)``, ``k, v (..., n_k, d_head)``.
    """
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    """Attention with separate query / key-value input widths.

    ``forward(x, context)`` attends from the tokens of ``x (..., n, dim)`` to
    ``context (..., m, context_dim)``; self-attention when ``context`` is None.
    The output projection starts at zero when ``zero_out`` is set.
    """

    def __init__(self, dim, heads, context_dim=None, zero_out=True):
        super().__init__()
        if dim % heads:
            raise DimensionError("hidden", dim, f"not divisible by {heads} heads")
        context_dim = dim if context_dim is None else context_dim
        self.dim = dim
        self.heads = heads
        self.context_dim = context_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.dim // self.heads).transpose(-2, -3)

    def attend(self, x, context=None):
        """Attention output before the output projection."""
        context = x if context is None else context
        if x.shape[-1] != self.dim or context.shape[-1] != self.context_dim:
            raise DimensionError(
                "features", x.shape[-1], f"expected query width {self.dim}, "
                f"context width {self.context_dim} (got {context.shape[-1]})"
            )
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        out = scaled_dot_product(q, k, v).transpose(-2, -3)
        return out.reshape(*out.shape[:-2], self.dim)

    def forward(self, x, context=None):
        return self.to_out(self.attend(x, context))
