"""Command-line surface: data synthesis, staged training, generation,
evaluation, and cost profiling."""

from __future__ import annotations

import argparse
import json
import secrets
import sys
from pathlib import Path

import numpy as np

from . import metrics, pipeline, profiler
from .config import RunConfig, make_config
from .data import (SynthSpec, build_vocab, save_manifest, save_vocab,
                   split_corpus, synth_corpus, write_pgm, load_manifest)
from .errors import ConfigError, CxrDiffError

STAGE_ALIASES = {"clip": "clip", "ae": "autoencoder", "autoencoder": "autoencoder",
                 "denoiser": "denoiser"}


def _overrides_from_extras(extras: list[str]) -> dict[str, str]:
    """Parse trailing '--key value' pairs into config overrides."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(extras):
        arg = extras[i]
        if not arg.startswith("--") or i + 1 >= len(extras):
            raise ConfigError(f"expected '--key value' override pairs, got {extras[i:]!r}")
        overrides[arg[2:].replace("-", "_")] = extras[i + 1]
        i += 2
    return overrides


def cmd_synth_data(args: argparse.Namespace) -> int:
    spec = SynthSpec(n_samples=args.n, image_size=args.size, seed=args.seed)
    corpus = synth_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(corpus, out)
    save_vocab(build_vocab(corpus), out / "vocab.txt")
    print(f"wrote {len(corpus)} samples to {out}")
    return 0


def cmd_train(args: argparse.Namespace, extras: list[str]) -> int:
    overrides = _overrides_from_extras(extras)
    if args.deterministic:
        overrides["deterministic"] = "true"
    cfg = make_config(Path(args.config) if args.config else None, overrides)
    stage = STAGE_ALIASES.get(args.stage)
    if stage is None:
        raise ConfigError(f"unknown stage '{args.stage}'")
    path = pipeline.train_stage(stage, cfg)
    print(f"stage '{stage}' checkpoint written to {path}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else secrets.randbelow(2**31)
    pipe = pipeline.Pipeline.load(Path(args.ckpt_dir))
    image = pipe.generate(args.report, seed=seed, steps=args.steps)
    write_pgm(np.clip(image, 0.0, 1.0), Path(args.out))
    print(f"seed {seed}")
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    pipe = pipeline.Pipeline.load(Path(args.ckpt_dir))
    corpus = load_manifest(Path(args.data))
    splits = split_corpus(corpus)
    test = splits["test"][: args.n_gen] if args.n_gen else splits["test"]

    extractor = lambda imgs: metrics.clip_image_features(pipe.clip, imgs)
    reports = [s.report for s in test]
    seeds = [args.seed * 1_000_003 + i for i in range(len(test))]
    gen = np.concatenate([pipe.generate_batch(reports[i : i + 64],
                                              seeds[i : i + 64], args.steps)
                          for i in range(0, len(reports), 64)])
    real = np.stack([s.image for s in test])
    fid_value = metrics.fid(real, gen, extractor)

    classifier = metrics.train_classifier(splits["train"], seed=args.seed)
    probs = classifier.probabilities(gen)
    auroc_table: dict[str, float] = {}
    from .data import LABEL_KEYS
    for j, key in enumerate(LABEL_KEYS):
        labels = np.array([s.labels[key] for s in test])
        auroc_table[key] = metrics.auroc(probs[:, j], labels)
    auroc_table["avg"] = float(np.mean([auroc_table[k] for k in LABEL_KEYS]))

    latency = metrics.measure_latency(pipe, steps=args.steps, n_trials=args.latency_trials)
    cost = profiler.profile(pipe.denoiser.config, batch=4,
                            seconds_per_image=latency.seconds_per_image)
    summary = {
        "fid": fid_value,
        "auroc": auroc_table,
        "params": cost.params,
        "flops_batch4": cost.flops_batch4,
        "sec_per_image": latency.seconds_per_image,
        "sampler_steps": args.steps,
        "n_generated": len(test),
        "flop_convention": cost.convention,
    }
    text = json.dumps(summary, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_profile(args: argparse.Namespace, extras: list[str]) -> int:
    if args.large_scale:
        ucfg = profiler.large_scale_config()
        note = ("note: width/heads are representative stand-ins; totals are not "
                "directly comparable to any externally reported model figures")
    else:
        overrides = _overrides_from_extras(extras)
        cfg = make_config(Path(args.config) if args.config else None, overrides)
        ucfg = pipeline.uvit_config(cfg)
        note = None
    report = profiler.profile(ucfg, batch=args.batch)
    print(f"convention: {report.convention}")
    print(f"config: dim={ucfg.dim} heads={ucfg.heads} "
          f"blocks={ucfg.enc_blocks}/{ucfg.mid_blocks}/{ucfg.dec_blocks} "
          f"patch={ucfg.patch} latent={ucfg.latent_h}x{ucfg.latent_w}x{ucfg.latent_ch} "
          f"text_len={ucfg.text_len}")
    print(f"params {report.params}")
    print(f"flops_batch{args.batch} {report.flops_batch4}")
    print(f"peak_activation_elements {report.peak_activation_elements}")
    if note:
        print(note)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrdiff",
                                     description="Report-to-image latent diffusion workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", required=True, choices=sorted(STAGE_ALIASES))
    p.add_argument("--config", default=None)
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("generate", help="generate one image from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="FID / AUROC / cost summary")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-gen", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latency-trials", type=int, default=3)
    p.add_argument("--out", default=None)

    p = sub.add_parser("profile", help="analytic parameter / FLOP report")
    p.add_argument("--config", default=None)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--large-scale", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        if args.command == "synth-data":
            if extras:
                raise ConfigError(f"unrecognized arguments: {extras!r}")
            return cmd_synth_data(args)
        if args.command == "train":
            return cmd_train(args, extras)
        if args.command == "generate":
            if extras:
                raise ConfigError(f"unrecognized arguments: {extras!r}")
            return cmd_generate(args)
        if args.command == "evaluate":
            if extras:
                raise ConfigError(f"unrecognized arguments: {extras!r}")
            return cmd_evaluate(args)
        if args.command == "profile":
            return cmd_profile(args, extras)
        raise ConfigError(f"unknown command {args.command}")
    except CxrDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
