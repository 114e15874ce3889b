"""Contrastive dual encoder: text transformer + conv image encoder.

Trained from scratch on the toy corpus with the symmetric InfoNCE
objective, then frozen; its per-token text features condition the
denoiser and its pooled image features double as the FID extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MAX_LEN, Sample, TokenizedReport, Vocabulary, tokenize
from .layers import TransformerBlock

TAU_MIN = 5e-3
TAU_MAX = 5e-1


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    d_txt: int = 128
    layers: int = 4
    heads: int = 4
    max_len: int = MAX_LEN
    d_joint: int = 128

    def validate(self) -> None:
        if self.d_txt % self.heads != 0:
            raise ValueError(f"d_txt {self.d_txt} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 32
    widths: tuple[int, int, int] = (32, 64, 128)
    d_joint: int = 128


@dataclass
class ReportEmbedding:
    """Frozen text features used as the denoiser condition."""

    tokens: np.ndarray  # (256, d_txt) float32; masked rows are zero
    mask: np.ndarray  # (256,) uint8
    pooled: np.ndarray  # (d_joint,) float32


class TextEncoder(nn.Module):
    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_txt)
        self.pos = nn.Parameter(torch.zeros(config.max_len, config.d_txt))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_txt, config.heads) for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.d_txt)
        self.pool_proj = nn.Linear(config.d_txt, config.d_joint)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """ids/mask (B, 256) -> per-token features (B, 256, d_txt) with zeros at
        padded rows, and a pooled (B, d_joint) vector (masked mean, projected).

        The transformer only runs over the longest real span in the batch;
        with key masking this is exact, and results never depend on batch
        companions.
        """
        if int(ids.max()) >= self.config.vocab_size:
            raise ValueError(
                f"token id {int(ids.max())} >= vocab size {self.config.vocab_size}"
            )
        B, full_len = ids.shape
        mask_bool = mask.bool()
        L = max(int(mask_bool.sum(dim=1).max().item()), 1)
        x = self.tok_emb(ids[:, :L]) + self.pos[:L]
        for block in self.blocks:
            x = block(x, mask_bool[:, :L])
        x = self.final_norm(x)
        x = x * mask_bool[:, :L, None]
        pooled = x.sum(dim=1) / mask_bool[:, :L].sum(dim=1, keepdim=True).clamp(min=1)
        pooled = self.pool_proj(pooled)
        tokens = torch.zeros(B, full_len, self.config.d_txt, dtype=x.dtype, device=x.device)
        tokens[:, :L] = x
        return tokens, pooled


class ImageEncoder(nn.Module):
    """Conv stem with three stride-2 stages, mean pool, linear head."""

    def __init__(self, config: ImageEncoderConfig):
        super().__init__()
        self.config = config
        w1, w2, w3 = config.widths
        self.conv1 = nn.Conv2d(1, w1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.head = nn.Linear(w3, config.d_joint)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        s = self.config.image_size
        if tuple(images.shape[-2:]) != (s, s):
            raise ValueError(f"image size {tuple(images.shape[-2:])} != ({s}, {s})")
        x = F.gelu(self.conv1(images))
        x = F.gelu(self.conv2(x))
        x = F.gelu(self.conv3(x))
        return self.head(x.mean(dim=(2, 3)))


class CLIPModel(nn.Module):
    def __init__(self, text_config: TextEncoderConfig, image_config: ImageEncoderConfig,
                 tau_init: float = 0.07):
        super().__init__()
        if text_config.d_joint != image_config.d_joint:
            raise ValueError("text and image encoders must project to the same d_joint")
        self.text = TextEncoder(text_config)
        self.image = ImageEncoder(image_config)
        self.log_tau = nn.Parameter(torch.tensor(float(np.log(tau_init))))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)


def contrastive_loss(img_emb: torch.Tensor, txt_emb: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities scaled by 1/tau."""
    if img_emb.shape != txt_emb.shape:
        raise ValueError(f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}")
    for name, emb in (("image", img_emb), ("text", txt_emb)):
        norms = emb.norm(dim=1)
        if bool((norms == 0).any()):
            raise ValueError(f"zero-norm {name} embedding row: cosine undefined")
    img = F.normalize(img_emb, dim=1)
    txt = F.normalize(txt_emb, dim=1)
    logits = img @ txt.T / tau
    target = torch.arange(img.shape[0], device=img.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def images_to_tensor(images: list[np.ndarray] | np.ndarray) -> torch.Tensor:
    """[0,1] grayscale arrays -> (B, 1, S, S) tensor in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr * 2.0 - 1.0)[:, None]


def reports_to_tensors(samples_or_reports, vocab: Vocabulary) -> tuple[torch.Tensor, torch.Tensor]:
    ids, masks = [], []
    for item in samples_or_reports:
        report = item.report if isinstance(item, Sample) else item
        tr = tokenize(report, vocab) if isinstance(report, str) else report
        ids.append(tr.ids)
        masks.append(tr.mask)
    return torch.from_numpy(np.stack(ids)), torch.from_numpy(np.stack(masks))


@torch.no_grad()
def encode_text(model: CLIPModel, report: TokenizedReport) -> ReportEmbedding:
    ids = torch.from_numpy(report.ids)[None]
    mask = torch.from_numpy(report.mask)[None]
    tokens, pooled = model.text(ids, mask)
    return ReportEmbedding(tokens[0].numpy().astype(np.float32),
                           report.mask.copy(),
                           pooled[0].numpy().astype(np.float32))


@torch.no_grad()
def encode_image(model: CLIPModel, image: np.ndarray) -> np.ndarray:
    return model.image(images_to_tensor(image)).numpy().astype(np.float32)[0]


@torch.no_grad()
def retrieval_top1(model: CLIPModel, images: torch.Tensor, ids: torch.Tensor,
                   masks: torch.Tensor, groups: list | None = None,
                   batch: int = 64) -> float:
    """Image-to-text top-1 accuracy within batches of the given size.

    The toy corpus contains many samples whose reports are duplicates or
    synonymous templates, so with ``groups`` given (one hashable id per
    sample, e.g. the label tuple) a retrieved text counts as a hit when it
    belongs to the same group; without groups the match must be exact-index.
    """
    hits = total = 0
    for start in range(0, images.shape[0], batch):
        img = F.normalize(model.image(images[start : start + batch]), dim=1)
        _, pooled = model.text(ids[start : start + batch], masks[start : start + batch])
        txt = F.normalize(pooled, dim=1)
        pred = (img @ txt.T).argmax(dim=1)
        if groups is None:
            hits += int((pred == torch.arange(img.shape[0])).sum())
        else:
            g = groups[start : start + batch]
            hits += sum(g[int(p)] == g[i] for i, p in enumerate(pred))
        total += img.shape[0]
    return hits / max(total, 1)


def sample_group(sample: Sample) -> tuple:
    return tuple(sample.labels[k] for k in sorted(sample.labels))
