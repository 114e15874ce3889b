"""Shared transformer building blocks (pre-norm attention, time embedding)."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_freq: float = 1000.0) -> torch.Tensor:
    """Sin/cos features of a scalar in [0,1]; t shape (B,), output (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(max_freq), half, dtype=t.dtype, device=t.device)
    )
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class MultiheadSelfAttention(nn.Module):
    """Full self-attention with optional key masking (True = attend)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attn: torch.Tensor | None = None
        self.record_attn = False

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, K, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, K, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, K, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, K, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = F.softmax(scores, dim=-1)
        if self.record_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, K, self.dim)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.)); MLP ratio 4."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), key_mask)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x
