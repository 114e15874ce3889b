"""Stage orchestration: training with prerequisites/freezing, and generation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .autoencoder import Autoencoder, AutoencoderConfig
from .clip import (CLIPModel, ImageEncoderConfig, TextEncoderConfig,
                   contrastive_loss, images_to_tensor, reports_to_tensors,
                   retrieval_top1, sample_group)
from .config import RunConfig
from .data import (Sample, Vocabulary, build_vocab, load_manifest, split_corpus,
                   tokenize)
from .errors import MissingPrerequisiteError
from .trainer import (MetricsLog, fit, load_checkpoint, load_into,
                      params_checksum, save_checkpoint, state_tensors)
from .uvit import UViT, UViTConfig, diffusion_loss

CLIP_CKPT = "clip.ckpt"
AE_CKPT = "autoencoder.ckpt"
DENOISER_CKPT = "denoiser.ckpt"

STAGE_PREREQS = {"clip": [], "autoencoder": [], "denoiser": ["clip", "autoencoder"]}
STAGE_FILES = {"clip": CLIP_CKPT, "autoencoder": AE_CKPT, "denoiser": DENOISER_CKPT}


def _apply_determinism(cfg: RunConfig) -> None:
    if cfg.deterministic or cfg.threads == 1:
        torch.set_num_threads(1)
    elif cfg.threads > 1:
        torch.set_num_threads(cfg.threads)


def text_config(cfg: RunConfig, vocab_size: int) -> TextEncoderConfig:
    return TextEncoderConfig(vocab_size=vocab_size, d_txt=cfg.clip_dim,
                             layers=cfg.clip_layers, heads=cfg.clip_heads,
                             d_joint=cfg.joint_dim)


def image_config(cfg: RunConfig) -> ImageEncoderConfig:
    return ImageEncoderConfig(image_size=cfg.image_size, d_joint=cfg.joint_dim)


def ae_config(cfg: RunConfig) -> AutoencoderConfig:
    return AutoencoderConfig(image_size=cfg.image_size, downsample=cfg.ae_downsample)


def uvit_config(cfg: RunConfig) -> UViTConfig:
    hw = cfg.image_size // cfg.ae_downsample
    return UViTConfig(dim=cfg.uvit_dim, heads=cfg.uvit_heads,
                      enc_blocks=cfg.uvit_enc_blocks, mid_blocks=cfg.uvit_mid_blocks,
                      patch=cfg.uvit_patch, latent_h=hw, latent_w=hw,
                      text_dim=cfg.clip_dim, mask_text_keys=cfg.mask_text_keys)


def schedule(cfg: RunConfig) -> diffusion.VarianceSchedule:
    return diffusion.make_schedule("linear", cfg.timesteps, cfg.beta_start, cfg.beta_end)


def _index_batches(n: int, batch: int, epochs_seed: int):
    """Factory for per-epoch shuffled index batches, deterministic in the seed."""

    def batches(epoch: int):
        g = torch.Generator().manual_seed(epochs_seed * 100003 + epoch)
        order = torch.randperm(n, generator=g)
        for start in range(0, n, batch):
            yield order[start : start + batch]

    return batches


def _load_corpus(cfg: RunConfig) -> list[Sample]:
    return load_manifest(Path(cfg.data_dir))


# ---------------------------------------------------------------------------
# Stage: contrastive encoder


def train_clip_stage(cfg: RunConfig, corpus: list[Sample] | None = None,
                     log: bool = True) -> Path:
    _apply_determinism(cfg)
    torch.manual_seed(cfg.seed)
    corpus = corpus if corpus is not None else _load_corpus(cfg)
    vocab = build_vocab(corpus)
    splits = split_corpus(corpus)
    model = CLIPModel(text_config(cfg, vocab.size), image_config(cfg))

    def prep(samples):
        images = images_to_tensor(np.stack([s.image for s in samples]))
        ids, masks = reports_to_tensors(samples, vocab)
        return images, ids, masks

    tr_images, tr_ids, tr_masks = prep(splits["train"])
    va_images, va_ids, va_masks = prep(splits["val"])

    def loss_fn(m: CLIPModel, idx: torch.Tensor) -> torch.Tensor:
        img_emb = m.image(tr_images[idx])
        _, txt_emb = m.text(tr_ids[idx], tr_masks[idx])
        return contrastive_loss(img_emb, txt_emb, m.tau)

    va_groups = [sample_group(s) for s in splits["val"]]

    def on_epoch_end(epoch: int) -> None:
        if log:
            acc = retrieval_top1(model, va_images, va_ids, va_masks, va_groups)
            print(f"clip epoch {epoch}: val top-1 retrieval {acc:.3f}")

    ckpt_dir = Path(cfg.ckpt_dir)
    metrics = MetricsLog(ckpt_dir / "clip_metrics.txt")
    steps = fit(model, _index_batches(len(splits["train"]), cfg.clip_batch, cfg.seed),
                loss_fn, cfg.clip_epochs, cfg.clip_lr, cfg.grad_clip, metrics,
                cfg.eval_interval, on_epoch_end)
    path = ckpt_dir / CLIP_CKPT
    save_checkpoint(state_tensors(model), {
        "stage": "clip", "step": steps, "vocab": vocab.tokens_in_order(),
        "clip_dim": cfg.clip_dim, "clip_layers": cfg.clip_layers,
        "clip_heads": cfg.clip_heads, "joint_dim": cfg.joint_dim,
        "image_size": cfg.image_size, "seed": cfg.seed,
    }, path)
    return path


# ---------------------------------------------------------------------------
# Stage: autoencoder


def train_autoencoder_stage(cfg: RunConfig, corpus: list[Sample] | None = None,
                            log: bool = True) -> Path:
    from .autoencoder import psnr

    _apply_determinism(cfg)
    torch.manual_seed(cfg.seed + 1)
    corpus = corpus if corpus is not None else _load_corpus(cfg)
    splits = split_corpus(corpus)
    model = Autoencoder(ae_config(cfg))
    tr_images = images_to_tensor(np.stack([s.image for s in splits["train"]]))
    va_images = images_to_tensor(np.stack([s.image for s in splits["val"]]))

    def loss_fn(m: Autoencoder, idx: torch.Tensor) -> torch.Tensor:
        x = tr_images[idx]
        return torch.mean((m.decode(m.encode(x)) - x) ** 2)

    def on_epoch_end(epoch: int) -> None:
        if log:
            with torch.no_grad():
                recon = model.decode(model.encode(va_images))
            val = psnr(recon.numpy() / 2 + 0.5, va_images.numpy() / 2 + 0.5)
            print(f"autoencoder epoch {epoch}: val PSNR {val:.2f} dB")

    ckpt_dir = Path(cfg.ckpt_dir)
    metrics = MetricsLog(ckpt_dir / "autoencoder_metrics.txt")
    steps = fit(model, _index_batches(len(splits["train"]), cfg.ae_batch, cfg.seed + 1),
                loss_fn, cfg.ae_epochs, cfg.ae_lr, cfg.grad_clip, metrics,
                cfg.eval_interval, on_epoch_end)

    with torch.no_grad():
        latents = model.encode(tr_images)
    latent_scale = float(latents.std())

    path = ckpt_dir / AE_CKPT
    save_checkpoint(state_tensors(model), {
        "stage": "autoencoder", "step": steps, "latent_scale": latent_scale,
        "image_size": cfg.image_size, "downsample": cfg.ae_downsample,
        "seed": cfg.seed,
    }, path)
    return path


# ---------------------------------------------------------------------------
# Stage: denoiser (requires frozen clip + autoencoder)


def require_checkpoint(ckpt_dir: Path, stage: str) -> Path:
    path = Path(ckpt_dir) / STAGE_FILES[stage]
    if not path.exists():
        raise MissingPrerequisiteError(
            f"missing prerequisite checkpoint for stage '{stage}': {path}"
        )
    return path


def load_clip(ckpt_dir: Path, cfg: RunConfig) -> tuple[CLIPModel, Vocabulary]:
    tensors, meta = load_checkpoint(require_checkpoint(ckpt_dir, "clip"))
    vocab = Vocabulary({tok: i for i, tok in enumerate(meta["vocab"])})
    tcfg = TextEncoderConfig(vocab_size=vocab.size, d_txt=meta["clip_dim"],
                             layers=meta["clip_layers"], heads=meta["clip_heads"],
                             d_joint=meta["joint_dim"])
    icfg = ImageEncoderConfig(image_size=meta["image_size"], d_joint=meta["joint_dim"])
    model = CLIPModel(tcfg, icfg)
    load_into(model, tensors)
    model.eval()
    return model, vocab


def load_autoencoder(ckpt_dir: Path) -> tuple[Autoencoder, float]:
    tensors, meta = load_checkpoint(require_checkpoint(ckpt_dir, "autoencoder"))
    model = Autoencoder(AutoencoderConfig(image_size=meta["image_size"],
                                          downsample=meta["downsample"]))
    load_into(model, tensors)
    model.eval()
    return model, float(meta["latent_scale"])


def encode_corpus_text(clip_model: CLIPModel, samples: list[Sample],
                       vocab: Vocabulary, batch: int = 256) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen text features for a corpus, trimmed to the corpus max length."""
    ids, masks = reports_to_tensors(samples, vocab)
    max_len = int(masks.sum(dim=1).max())
    feats = []
    with torch.no_grad():
        for start in range(0, ids.shape[0], batch):
            tok, _ = clip_model.text(ids[start : start + batch], masks[start : start + batch])
            feats.append(tok[:, :max_len].clone())
    return torch.cat(feats), masks


def train_denoiser_stage(cfg: RunConfig, corpus: list[Sample] | None = None,
                         log: bool = True) -> Path:
    _apply_determinism(cfg)
    torch.manual_seed(cfg.seed + 2)
    ckpt_dir = Path(cfg.ckpt_dir)
    clip_model, vocab = load_clip(ckpt_dir, cfg)
    ae_model, latent_scale = load_autoencoder(ckpt_dir)
    clip_sum = params_checksum(clip_model)
    ae_sum = params_checksum(ae_model)

    corpus = corpus if corpus is not None else _load_corpus(cfg)
    train_samples = split_corpus(corpus)["train"]
    images = images_to_tensor(np.stack([s.image for s in train_samples]))
    with torch.no_grad():
        latents = torch.cat([ae_model.encode(images[i : i + 256])
                             for i in range(0, images.shape[0], 256)])
    latents = latents / latent_scale
    ctx_cache, masks = encode_corpus_text(clip_model, train_samples, vocab)

    ucfg = uvit_config(cfg)
    model = UViT(ucfg)
    sched = schedule(cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 3)

    def loss_fn(m: UViT, idx: torch.Tensor) -> torch.Tensor:
        z0 = latents[idx]
        ctx = torch.zeros(len(idx), ucfg.text_len, ucfg.text_dim)
        ctx[:, : ctx_cache.shape[1]] = ctx_cache[idx]
        return diffusion_loss(m, z0, ctx, masks[idx], sched, gen)

    def on_epoch_end(epoch: int) -> None:
        # freeze contract: prerequisite weights must never move
        assert params_checksum(clip_model) == clip_sum, "clip weights changed"
        assert params_checksum(ae_model) == ae_sum, "autoencoder weights changed"
        if log and epoch % 10 == 0:
            print(f"denoiser epoch {epoch} done")

    metrics = MetricsLog(ckpt_dir / "denoiser_metrics.txt")
    steps = fit(model, _index_batches(latents.shape[0], cfg.denoiser_batch, cfg.seed + 2),
                loss_fn, cfg.denoiser_epochs, cfg.denoiser_lr, cfg.grad_clip, metrics,
                cfg.eval_interval, on_epoch_end)

    path = ckpt_dir / DENOISER_CKPT
    save_checkpoint(state_tensors(model), {
        "stage": "denoiser", "step": steps,
        "uvit_dim": ucfg.dim, "uvit_heads": ucfg.heads,
        "uvit_enc_blocks": ucfg.enc_blocks, "uvit_mid_blocks": ucfg.mid_blocks,
        "uvit_patch": ucfg.patch, "latent_h": ucfg.latent_h, "latent_w": ucfg.latent_w,
        "text_dim": ucfg.text_dim, "mask_text_keys": ucfg.mask_text_keys,
        "timesteps": cfg.timesteps, "beta_start": cfg.beta_start,
        "beta_end": cfg.beta_end, "clip_checksum": clip_sum,
        "autoencoder_checksum": ae_sum, "seed": cfg.seed,
    }, path)
    return path


def train_stage(stage: str, cfg: RunConfig, corpus: list[Sample] | None = None,
                log: bool = True) -> Path:
    for prereq in STAGE_PREREQS.get(stage, []):
        require_checkpoint(Path(cfg.ckpt_dir), prereq)
    if stage == "clip":
        return train_clip_stage(cfg, corpus, log)
    if stage == "autoencoder":
        return train_autoencoder_stage(cfg, corpus, log)
    if stage == "denoiser":
        return train_denoiser_stage(cfg, corpus, log)
    raise ValueError(f"unknown stage '{stage}'")


# ---------------------------------------------------------------------------
# Loading the full pipeline and generating


class Pipeline:
    """Frozen end-to-end report-to-image generator."""

    def __init__(self, clip_model: CLIPModel, vocab: Vocabulary, ae_model: Autoencoder,
                 latent_scale: float, denoiser: UViT,
                 sched: diffusion.VarianceSchedule):
        self.clip = clip_model
        self.vocab = vocab
        self.ae = ae_model
        self.latent_scale = latent_scale
        self.denoiser = denoiser
        self.sched = sched

    @classmethod
    def load(cls, ckpt_dir: Path, cfg: RunConfig | None = None) -> "Pipeline":
        cfg = cfg or RunConfig()
        ckpt_dir = Path(ckpt_dir)
        clip_model, vocab = load_clip(ckpt_dir, cfg)
        ae_model, latent_scale = load_autoencoder(ckpt_dir)
        tensors, meta = load_checkpoint(require_checkpoint(ckpt_dir, "denoiser"))
        ucfg = UViTConfig(dim=meta["uvit_dim"], heads=meta["uvit_heads"],
                          enc_blocks=meta["uvit_enc_blocks"],
                          mid_blocks=meta["uvit_mid_blocks"], patch=meta["uvit_patch"],
                          latent_h=meta["latent_h"], latent_w=meta["latent_w"],
                          text_dim=meta["text_dim"],
                          mask_text_keys=bool(meta["mask_text_keys"]))
        denoiser = UViT(ucfg)
        load_into(denoiser, tensors)
        denoiser.eval()
        sched = diffusion.make_schedule("linear", meta["timesteps"],
                                        meta["beta_start"], meta["beta_end"])
        return cls(clip_model, vocab, ae_model, latent_scale, denoiser, sched)

    def _context(self, reports: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids, masks = reports_to_tensors(reports, self.vocab)
        with torch.no_grad():
            tokens, _ = self.clip.text(ids, masks)
        return tokens, masks

    @torch.no_grad()
    def generate_batch(self, reports: list[str], seeds: list[int],
                       steps: int = 50, eta: float = 0.0) -> np.ndarray:
        """One image per (report, seed); returns (B, S, S) float in [0,1]."""
        assert len(reports) == len(seeds)
        ctx, masks = self._context(reports)
        ucfg = self.denoiser.config
        shape = (1, ucfg.latent_ch, ucfg.latent_h, ucfg.latent_w)
        T = self.sched.T
        x = torch.cat([diffusion.step_noise(s, T + 1, shape) for s in seeds])
        ts = diffusion.sampling_timesteps(T, steps)
        for i, t in enumerate(ts):
            t_norm = torch.full((x.shape[0],), t / T)
            eps_hat = self.denoiser(x, t_norm, ctx, masks)
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            noise = None
            if eta > 0.0:
                noise = torch.cat([diffusion.step_noise(s, t, shape) for s in seeds])
            x = diffusion.ddim_reverse_step(x, t, eps_hat, self.sched,
                                            eta=eta, noise=noise, t_prev=t_prev)
        decoded = self.ae.decode(x * self.latent_scale)
        return (decoded[:, 0].numpy() + 1.0) / 2.0

    def generate(self, report: str, seed: int, steps: int = 50,
                 eta: float = 0.0) -> np.ndarray:
        return self.generate_batch([report], [seed], steps, eta)[0]
