"""Convolutional autoencoder defining the diffusion latent space.

Encoder downsamples by a power-of-two factor to an 8-channel latent;
decoder mirrors it and saturates to [-1, 1]. Trained with plain MSE and
frozen afterwards; a global latent std stored in the checkpoint rescales
latents to roughly unit variance for the diffusion stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

LATENT_CHANNELS = 8


@dataclass(frozen=True)
class AutoencoderConfig:
    image_size: int = 32
    downsample: int = 4
    widths: tuple[int, ...] = (32, 64)
    latent_ch: int = LATENT_CHANNELS

    @property
    def stages(self) -> int:
        return int(math.log2(self.downsample))

    @property
    def latent_hw(self) -> int:
        return self.image_size // self.downsample

    def validate(self) -> None:
        if self.downsample < 2 or self.downsample & (self.downsample - 1):
            raise ConfigError(f"downsample must be a power of two >= 2, got {self.downsample}")
        if self.image_size % self.downsample:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by downsample {self.downsample}"
            )
        if self.latent_ch != LATENT_CHANNELS:
            raise ConfigError(f"latent channels fixed at {LATENT_CHANNELS}")
        if len(self.widths) != self.stages:
            raise ConfigError(
                f"need one width per stage: {self.stages} stages, {len(self.widths)} widths"
            )


@dataclass
class LatentTensor:
    """Channels-last latent (h, w, 8) as seen by callers."""

    z: np.ndarray

    def __post_init__(self) -> None:
        if self.z.ndim != 3 or self.z.shape[2] != LATENT_CHANNELS:
            raise ValueError(f"latent must be (h, w, {LATENT_CHANNELS}), got {self.z.shape}")
        if not np.isfinite(self.z).all():
            raise ValueError("latent contains non-finite entries")


class Autoencoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        enc = []
        c_in = 1
        for w in config.widths:
            enc.append(nn.Conv2d(c_in, w, 3, stride=2, padding=1))
            c_in = w
        self.enc_convs = nn.ModuleList(enc)
        self.enc_out = nn.Conv2d(c_in, config.latent_ch, 3, padding=1)
        dec = []
        c_in = config.latent_ch
        for w in reversed(config.widths):
            dec.append(nn.ConvTranspose2d(c_in, w, 4, stride=2, padding=1))
            c_in = w
        self.dec_convs = nn.ModuleList(dec)
        self.dec_out = nn.Conv2d(c_in, 1, 3, padding=1)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) in [-1,1] -> (B, 8, H/s, W/s)."""
        s = self.config.image_size
        if tuple(images.shape[-2:]) != (s, s):
            raise ValueError(f"image size {tuple(images.shape[-2:])} != ({s}, {s})")
        x = images
        for conv in self.enc_convs:
            x = F.gelu(conv(x))
        return self.enc_out(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """(B, 8, h, w) -> (B, 1, H, W) in [-1,1] (tanh-saturated)."""
        hw = self.config.latent_hw
        if tuple(z.shape[1:]) != (self.config.latent_ch, hw, hw):
            raise ValueError(
                f"latent shape {tuple(z.shape[1:])} != {(self.config.latent_ch, hw, hw)}"
            )
        x = z
        for conv in self.dec_convs:
            x = F.gelu(conv(x))
        return torch.tanh(self.dec_out(x))


@torch.no_grad()
def encode_image(model: Autoencoder, image: np.ndarray) -> LatentTensor:
    """Single [0,1] grayscale image -> channels-last LatentTensor."""
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {image.shape}")
    x = torch.from_numpy(image.astype(np.float32) * 2.0 - 1.0)[None, None]
    z = model.encode(x)[0]
    return LatentTensor(z.permute(1, 2, 0).numpy())


@torch.no_grad()
def decode_latent(model: Autoencoder, latent: LatentTensor) -> np.ndarray:
    """Channels-last latent -> [0,1] grayscale image."""
    z = torch.from_numpy(latent.z.astype(np.float32)).permute(2, 0, 1)[None]
    x = model.decode(z)[0, 0].numpy()
    return (x + 1.0) / 2.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def image_to_pgm_bytes(image_pm1: np.ndarray) -> np.ndarray:
    """[-1,1] image -> uint8 via round-half-away-from-zero on the 0..255 scale."""
    scaled = (np.asarray(image_pm1, dtype=np.float64) + 1.0) / 2.0 * 255.0
    rounded = np.floor(np.abs(scaled) + 0.5) * np.sign(scaled)
    return np.clip(rounded, 0, 255).astype(np.uint8)
