"""Analytic parameter/FLOP accounting with a hook-based measured oracle.

Conventions (stated in every report): 1 multiply-add = 2 FLOPs; a linear
layer of in m / out n over b*k vectors costs 2*b*k*m*n; attention adds
2*b*heads*k^2*(D/heads) each for scores and value aggregation plus
5*b*heads*k^2 for softmax; layer-norm costs 5*b*k*D; a convolution costs
2*b*H'*W'*C_out*C_in*k_h*k_w. All counts are exact integers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError
from .layers import MultiheadSelfAttention
from .uvit import UViT, UViTConfig

FLOP_CONVENTION = "1 multiply-add = 2 FLOPs"


@dataclass
class CostReport:
    params: int
    flops_batch4: int
    seconds_per_image: float
    peak_activation_elements: int
    convention: str = FLOP_CONVENTION

    def __post_init__(self) -> None:
        if min(self.params, self.flops_batch4, self.peak_activation_elements) < 0 \
                or self.seconds_per_image < 0:
            raise ValueError("cost report fields must be nonnegative")


def count_params(config: UViTConfig) -> int:
    """Closed-form parameter count of the denoiser."""
    config.validate()
    D = config.dim
    P = config.patch * config.patch * config.latent_ch
    n_blocks = config.enc_blocks + config.mid_blocks + config.dec_blocks
    total = 0
    total += config.time_embed_dim * D + D  # time MLP layer 1
    total += D * D + D  # time MLP layer 2
    total += config.text_dim * D + D  # text projection
    total += P * D + D  # patch projection
    total += config.seq_len * D  # position table
    total += n_blocks * (12 * D * D + 13 * D)  # qkv+out, MLP(4x), 2 layer-norms
    total += config.dec_blocks * (2 * D * D + D)  # skip fusions
    total += 2 * D  # final layer-norm
    total += D * P + P  # output head
    return total


def count_flops(config: UViTConfig, batch: int = 4) -> int:
    """Closed-form forward-pass FLOPs at the given batch size (default 4)."""
    config.validate()
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    D = config.dim
    P = config.patch * config.patch * config.latent_ch
    k = config.seq_len
    M = config.n_patches
    h = config.heads
    dh = D // h
    b = batch
    n_blocks = config.enc_blocks + config.mid_blocks + config.dec_blocks

    total = 0
    total += 2 * b * config.time_embed_dim * D + 2 * b * D * D  # time MLP
    total += 2 * b * config.text_len * config.text_dim * D  # text projection
    total += 2 * b * M * P * D  # patch projection
    per_block = (
        5 * b * k * D  # ln1
        + 2 * b * k * D * (3 * D)  # qkv
        + 2 * (2 * b * h * k * k * dh)  # scores + value aggregation
        + 5 * b * h * k * k  # softmax
        + 2 * b * k * D * D  # attention output projection
        + 5 * b * k * D  # ln2
        + 2 * b * k * D * (4 * D)  # mlp up
        + 2 * b * k * (4 * D) * D  # mlp down
    )
    total += n_blocks * per_block
    total += config.dec_blocks * (2 * b * k * (2 * D) * D)  # skip fusions
    total += 5 * b * k * D  # final layer-norm
    total += 2 * b * M * D * P  # output head
    return total


def peak_activation_elements(config: UViTConfig, batch: int = 4) -> int:
    """Largest single activation: MLP hidden state vs attention score matrix."""
    k = config.seq_len
    return max(4 * batch * k * config.dim, batch * config.heads * k * k)


class OpCounter:
    """Measured oracle: forward hooks apply the per-op cost rules to the
    shapes actually observed, independent of the closed-form arithmetic."""

    def __init__(self, model: nn.Module):
        self.model = model
        self.flops = 0
        self.peak = 0
        self.handles = []

    def _note(self, numel: int) -> None:
        self.peak = max(self.peak, numel)

    def _hook(self, module, inputs, output):
        x = inputs[0]
        if isinstance(module, nn.Linear):
            self.flops += 2 * output.numel() * module.in_features
            self._note(output.numel())
        elif isinstance(module, nn.LayerNorm):
            self.flops += 5 * x.numel()
            self._note(output.numel())
        elif isinstance(module, MultiheadSelfAttention):
            B, K, _ = x.shape
            h, dh = module.heads, module.head_dim
            self.flops += 2 * (2 * B * h * K * K * dh) + 5 * B * h * K * K
            self._note(B * h * K * K)
        elif isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            kh, kw = module.kernel_size
            self.flops += 2 * output.numel() * module.in_channels * kh * kw
            self._note(output.numel())

    def __enter__(self):
        for mod in self.model.modules():
            if isinstance(mod, (nn.Linear, nn.LayerNorm, MultiheadSelfAttention,
                                nn.Conv2d, nn.ConvTranspose2d)):
                self.handles.append(mod.register_forward_hook(self._hook))
        return self

    def __exit__(self, *exc):
        for handle in self.handles:
            handle.remove()
        return False


def measured_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def measured_flops(config: UViTConfig, batch: int = 4) -> tuple[int, int]:
    """Instantiate the denoiser and count ops by hooked forward; returns
    (flops, peak activation elements)."""
    model = UViT(config)
    model.eval()
    z = torch.zeros(batch, config.latent_ch, config.latent_h, config.latent_w)
    t = torch.full((batch,), 0.5)
    ctx = torch.zeros(batch, config.text_len, config.text_dim)
    mask = torch.ones(batch, config.text_len, dtype=torch.uint8)
    with OpCounter(model) as counter, torch.no_grad():
        model(z, t, ctx, mask)
    return counter.flops, counter.peak


def profile(config: UViTConfig, batch: int = 4,
            seconds_per_image: float = 0.0) -> CostReport:
    return CostReport(count_params(config), count_flops(config, batch),
                      seconds_per_image, peak_activation_elements(config, batch))


def large_scale_config() -> UViTConfig:
    """8 encoder / 1 middle / 8 decoder blocks over 32x32x8 latents
    (256x256 images downsampled by 8) with 256 text tokens. Width and heads
    are free choices at this scale; 512/8 are representative stand-ins, so
    the resulting totals are estimates, not comparable reference figures."""
    return UViTConfig(dim=512, heads=8, enc_blocks=8, mid_blocks=1, patch=2,
                      latent_h=32, latent_w=32, text_dim=512,
                      mask_text_keys=False)
