"""Transformer denoiser over [time | text | image-patch] token sequences.

Text conditioning happens through full joint self-attention: report tokens
sit in the same sequence as latent patches, so no cross-attention module
is needed. Long skip connections pair encoder and decoder blocks LIFO,
fused by concatenate-then-linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from einops import rearrange

from .errors import ConfigError
from .layers import MultiheadSelfAttention, TransformerBlock, sinusoidal_embedding


@dataclass(frozen=True)
class UViTConfig:
    dim: int = 128
    heads: int = 4
    enc_blocks: int = 4
    mid_blocks: int = 1
    patch: int = 2
    latent_h: int = 8
    latent_w: int = 8
    latent_ch: int = 8
    text_len: int = 256
    text_dim: int = 128
    time_embed_dim: int = 64
    # Masked text keys let the forward pass skip padded report positions
    # entirely; outputs at real positions are unchanged (see tests).
    mask_text_keys: bool = True

    @property
    def dec_blocks(self) -> int:
        return self.enc_blocks  # skip pairing requires N_d = N_e

    @property
    def n_patches(self) -> int:
        return (self.latent_h // self.patch) * (self.latent_w // self.patch)

    @property
    def seq_len(self) -> int:
        return 1 + self.text_len + self.n_patches

    def validate(self) -> None:
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.latent_h % self.patch or self.latent_w % self.patch:
            raise ConfigError(
                f"latent {self.latent_h}x{self.latent_w} not divisible by patch {self.patch}"
            )
        if self.enc_blocks < 1 or self.mid_blocks < 1:
            raise ConfigError("need at least one encoder and one middle block")


def patchify(z: torch.Tensor, p: int) -> torch.Tensor:
    """(B, C, h, w) -> (B, M, p*p*C); each row is one p x p x C patch,
    flattened row-major with channels last, patches in row-major order."""
    if z.shape[-2] % p or z.shape[-1] % p:
        raise ValueError(f"latent {tuple(z.shape[-2:])} not divisible by patch {p}")
    return rearrange(z, "b c (gh p1) (gw p2) -> b (gh gw) (p1 p2 c)", p1=p, p2=p)


def unpatchify(tokens: torch.Tensor, p: int, h: int, w: int, c: int) -> torch.Tensor:
    return rearrange(tokens, "b (gh gw) (p1 p2 c) -> b c (gh p1) (gw p2)",
                     gh=h // p, gw=w // p, p1=p, p2=p, c=c)


class UViT(nn.Module):
    def __init__(self, config: UViTConfig):
        super().__init__()
        config.validate()
        self.config = config
        D = config.dim
        patch_dim = config.patch * config.patch * config.latent_ch

        self.time_fc1 = nn.Linear(config.time_embed_dim, D)
        self.time_fc2 = nn.Linear(D, D)
        self.text_proj = nn.Linear(config.text_dim, D)
        self.patch_proj = nn.Linear(patch_dim, D)
        self.pos = nn.Parameter(torch.zeros(config.seq_len, D))
        nn.init.normal_(self.pos, std=0.02)

        self.encoder = nn.ModuleList(
            TransformerBlock(D, config.heads) for _ in range(config.enc_blocks)
        )
        self.middle = nn.ModuleList(
            TransformerBlock(D, config.heads) for _ in range(config.mid_blocks)
        )
        self.decoder = nn.ModuleList(
            TransformerBlock(D, config.heads) for _ in range(config.dec_blocks)
        )
        self.skip_proj = nn.ModuleList(
            nn.Linear(2 * D, D) for _ in range(config.dec_blocks)
        )
        self.final_norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, patch_dim)

    def embed_inputs(self, z_t: torch.Tensor, t_norm: torch.Tensor,
                     ctx: torch.Tensor, ctx_mask: torch.Tensor,
                     trim: bool = False) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Build the token sequence [time | text | image] plus positions.

        With ``trim`` the text span is cut to the longest real length in the
        batch; kept positions use their original position-table rows, so the
        result matches the untrimmed masked computation exactly.
        """
        cfg = self.config
        B = z_t.shape[0]
        if tuple(z_t.shape[1:]) != (cfg.latent_ch, cfg.latent_h, cfg.latent_w):
            raise ValueError(
                f"latent shape {tuple(z_t.shape[1:])} != "
                f"{(cfg.latent_ch, cfg.latent_h, cfg.latent_w)}"
            )
        if ctx.shape[1] != cfg.text_len or ctx.shape[2] != cfg.text_dim:
            raise ValueError(
                f"text features {tuple(ctx.shape[1:])} != {(cfg.text_len, cfg.text_dim)}"
            )
        mask_bool = ctx_mask.bool()
        text_pos = self.pos[1 : 1 + cfg.text_len]
        if trim:
            L = max(int(mask_bool.sum(dim=1).max().item()), 1)
            ctx = ctx[:, :L]
            mask_bool = mask_bool[:, :L]
            text_pos = text_pos[:L]

        time_tok = self.time_fc2(torch.nn.functional.gelu(
            self.time_fc1(sinusoidal_embedding(t_norm.to(z_t.dtype), cfg.time_embed_dim))
        ))[:, None, :]
        text_tok = self.text_proj(ctx)
        img_tok = self.patch_proj(patchify(z_t, cfg.patch))

        x = torch.cat([time_tok + self.pos[:1], text_tok + text_pos,
                       img_tok + self.pos[1 + cfg.text_len :]], dim=1)
        if cfg.mask_text_keys:
            ones = torch.ones(B, 1, dtype=torch.bool, device=x.device)
            key_mask = torch.cat(
                [ones, mask_bool,
                 torch.ones(B, cfg.n_patches, dtype=torch.bool, device=x.device)], dim=1)
        else:
            key_mask = None
        return x, key_mask

    def forward(self, z_t: torch.Tensor, t_norm: torch.Tensor,
                ctx: torch.Tensor, ctx_mask: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        trim = cfg.mask_text_keys
        x, key_mask = self.embed_inputs(z_t, t_norm, ctx, ctx_mask, trim=trim)

        skips: list[torch.Tensor] = []
        for block in self.encoder:
            x = block(x, key_mask)
            skips.append(x)
        for block in self.middle:
            x = block(x, key_mask)
        for block, proj in zip(self.decoder, self.skip_proj):
            x = proj(torch.cat([x, skips.pop()], dim=-1))
            x = block(x, key_mask)

        x = self.final_norm(x)
        img_out = self.head(x[:, -cfg.n_patches :])
        return unpatchify(img_out, cfg.patch, cfg.latent_h, cfg.latent_w, cfg.latent_ch)


def denoise(model: UViT, z_t: torch.Tensor, t: int, T: int,
            ctx: torch.Tensor, ctx_mask: torch.Tensor) -> torch.Tensor:
    """Single-call wrapper: 1-based timestep scaled to t/T before embedding."""
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside [1, {T}]")
    t_norm = torch.full((z_t.shape[0],), t / T, dtype=z_t.dtype)
    return model(z_t, t_norm, ctx, ctx_mask)


def diffusion_loss(model: UViT, z0: torch.Tensor, ctx: torch.Tensor,
                   ctx_mask: torch.Tensor, sched, generator: torch.Generator) -> torch.Tensor:
    """Noise-prediction objective: per item draw t ~ U{1..T}, eps ~ N(0,I),
    corrupt with the closed-form marginal, and regress the injected noise."""
    B = z0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    ab = torch.as_tensor(sched.alpha_bar, dtype=z0.dtype)[t - 1].view(B, 1, 1, 1)
    z_t = torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps
    pred = model(z_t, t.to(z0.dtype) / sched.T, ctx, ctx_mask)
    return torch.mean((eps - pred) ** 2)
