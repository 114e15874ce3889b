"""Toy report/image corpus: procedural generation, manifests, tokenization.

Stands in for a real radiology dataset: 32x32 grayscale images with a
vertical lung-field gradient plus an optional elliptical opacity, paired
with templated reports whose side/size slots match the rendered image by
construction.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataIOError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_LEN = 256

HEALTHY_REPORT = "no acute findings."

FINDING_TEMPLATES = [
    "there is a {size} opacity in the {side} lung.",
    "a {size} {side} opacity is seen.",
    "{size} opacity noted in the {side} lung field.",
    "the {side} lung shows a {size} opacity.",
    "focal {size} opacity in the {side} hemithorax.",
    "a {size} opacity projects over the {side} lung.",
    "{side} lung with a {size} rounded opacity.",
    "new {size} opacity within the {side} lung.",
    "there is {size} focal opacity on the {side}.",
    "persistent {size} opacity at the {side} base.",
    "a solitary {size} opacity is present in the {side} lung.",
    "{size} patchy opacity seen in the {side} lung zone.",
]

LABEL_KEYS = ("opacity", "left", "right", "large")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the procedural corpus generator."""

    n_samples: int
    image_size: int = 32
    seed: int = 0
    presence_rate: float = 0.5
    small_radius: tuple[float, float] = (2.0, 3.0)
    large_radius: tuple[float, float] = (4.0, 5.5)
    noise_sigma: float = 0.02
    ellipse_contrast: float = 0.4

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.image_size % 4 != 0:
            raise ConfigError(
                f"image_size must be divisible by 4 (autoencoder stride x patch size), "
                f"got {self.image_size}"
            )
        if not 0.0 <= self.presence_rate <= 1.0:
            raise ConfigError(f"presence_rate must be in [0,1], got {self.presence_rate}")


@dataclass
class Sample:
    image: np.ndarray  # float32 in [0,1], (size, size), quantized to 1/255 steps
    report: str
    labels: dict[str, int]
    side: str  # left | right | none
    severity: str  # small | large | none


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def tokens_in_order(self) -> list[str]:
        return [t for t, _ in sorted(self.token_to_id.items(), key=lambda kv: kv[1])]


@dataclass
class TokenizedReport:
    ids: np.ndarray  # int64, length 256
    mask: np.ndarray  # uint8, length 256; 1 = real token

    def __post_init__(self) -> None:
        assert self.ids.shape == (MAX_LEN,) and self.mask.shape == (MAX_LEN,)


def _render_image(spec: SynthSpec, present: bool, side: str, severity: str,
                  rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = 0.25 + 0.45 * (yy / (s - 1))
    img += rng.normal(0.0, spec.noise_sigma, size=(s, s))
    if present:
        lo, hi = (0.62, 0.78) if side == "right" else (0.22, 0.38)
        cx = rng.uniform(lo, hi) * s
        cy = rng.uniform(0.30, 0.70) * s
        rlo, rhi = spec.large_radius if severity == "large" else spec.small_radius
        scale = s / 32.0
        rx = rng.uniform(rlo, rhi) * scale
        ry = rng.uniform(rlo, rhi) * scale
        d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        img += spec.ellipse_contrast * np.clip(1.5 - d, 0.0, 1.0)
    img = np.clip(img, 0.0, 1.0)
    # quantize to 8-bit levels so PGM round trips are bit exact
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def _make_sample(spec: SynthSpec, index: int) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFFFFFF, index]))
    present = bool(rng.random() < spec.presence_rate)
    if not present:
        image = _render_image(spec, False, "none", "none", rng)
        labels = {k: 0 for k in LABEL_KEYS}
        return Sample(image, HEALTHY_REPORT, labels, "none", "none")
    side = "left" if rng.random() < 0.5 else "right"
    severity = "large" if rng.random() < 0.5 else "small"
    template = FINDING_TEMPLATES[int(rng.integers(len(FINDING_TEMPLATES)))]
    report = template.format(size=severity, side=side)
    image = _render_image(spec, True, side, severity, rng)
    labels = {
        "opacity": 1,
        "left": int(side == "left"),
        "right": int(side == "right"),
        "large": int(severity == "large"),
    }
    return Sample(image, report, labels, side, severity)


def synth_corpus(spec: SynthSpec) -> list[Sample]:
    """Generate a deterministic toy corpus; each sample depends only on (seed, index)."""
    spec.validate()
    return [_make_sample(spec, i) for i in range(spec.n_samples)]


def derive_labels_from_image(image: np.ndarray, threshold: float = 0.15,
                             min_pixels: int = 6) -> tuple[int, str]:
    """Recover (presence, side) by pixel analysis alone.

    The background intensity depends only on the row, so the per-row median
    is a robust background estimate (the ellipse never covers half a row).
    Presence = enough above-background pixels; side = centroid half-plane.
    """
    residual = image - np.median(image, axis=1, keepdims=True)
    mask = residual > threshold
    if mask.sum() < min_pixels:
        return 0, "none"
    cols = np.nonzero(mask)[1]
    side = "left" if cols.mean() < image.shape[1] / 2.0 else "right"
    return 1, side


def normalize_tokens(text: str) -> list[str]:
    table = str.maketrans("", "", string.punctuation)
    return text.lower().translate(table).split()


def build_vocab(corpus: list[Sample]) -> Vocabulary:
    """Frequency-descending, lexicographically tie-broken vocabulary."""
    if not corpus:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for sample in corpus:
        for tok in normalize_tokens(sample.report):
            counts[tok] = counts.get(tok, 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    token_to_id = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for offset, (tok, _) in enumerate(ordered):
        token_to_id[tok] = len(SPECIAL_TOKENS) + offset
    return Vocabulary(token_to_id)


def tokenize(report: str, vocab: Vocabulary) -> TokenizedReport:
    """BOS + tokens + EOS, padded/truncated to exactly 256 positions.

    Over-long reports keep the first 254 content tokens and force EOS at
    position 255, so the mask stays a prefix of ones.
    """
    toks = normalize_tokens(report)
    content = [vocab.id_of(t) for t in toks][: MAX_LEN - 2]
    ids = np.full(MAX_LEN, PAD_ID, dtype=np.int64)
    ids[0] = BOS_ID
    ids[1 : 1 + len(content)] = content
    ids[1 + len(content)] = EOS_ID
    mask = np.zeros(MAX_LEN, dtype=np.uint8)
    mask[: 2 + len(content)] = 1
    return TokenizedReport(ids, mask)


def split_index(index: int) -> str:
    """70/10/20 train/val/test split by index hash."""
    h = hashlib.blake2s(str(index).encode(), digest_size=4).digest()
    bucket = int.from_bytes(h, "little") % 10
    if bucket < 7:
        return "train"
    if bucket < 8:
        return "val"
    return "test"


def split_corpus(corpus: list[Sample]) -> dict[str, list[Sample]]:
    splits: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    for i, sample in enumerate(corpus):
        splits[split_index(i)].append(sample)
    return splits


# ---------------------------------------------------------------------------
# PGM + manifest I/O


def write_pgm(image: np.ndarray, path: Path) -> None:
    """Binary PGM (P5), maxval 255, row-major; input float in [0,1]."""
    data = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"image file not found: {path}")
    raw = path.read_bytes()
    if len(raw) == 0:
        raise DataIOError(f"empty image file: {path}")
    try:
        if not raw.startswith(b"P5"):
            raise ValueError("not a P5 PGM")
        # header: magic, width height, maxval, each terminated by whitespace
        fields: list[bytes] = []
        pos = 2
        while len(fields) < 3:
            while pos < len(raw) and raw[pos : pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            fields.append(raw[start:pos])
        pos += 1  # single whitespace after maxval
        w, h, maxval = (int(x) for x in fields)
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
        if data.size != w * h:
            raise ValueError("truncated pixel data")
    except ValueError as exc:
        raise DataIOError(f"bad PGM file {path}: {exc}") from exc
    return (data.reshape(h, w).astype(np.float32)) / 255.0


def _side_severity_from_labels(labels: dict[str, int]) -> tuple[str, str]:
    if not labels.get("opacity", 0):
        return "none", "none"
    side = "left" if labels.get("left", 0) else "right"
    severity = "large" if labels.get("large", 0) else "small"
    return side, severity


def save_manifest(samples: list[Sample], out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for i, sample in enumerate(samples):
            rel = f"images/{i:05d}.pgm"
            write_pgm(sample.image, out_dir / rel)
            f.write(json.dumps({"image": rel, "report": sample.report,
                                "labels": sample.labels}) + "\n")
    return manifest


def load_manifest(path: Path) -> list[Sample]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise DataIOError(f"manifest not found: {path}")
    root = path.parent
    samples: list[Sample] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataIOError(f"manifest parse error at line {lineno}: {exc}") from exc
            for key in ("image", "report", "labels"):
                if key not in record:
                    raise DataIOError(f"manifest line {lineno} missing key '{key}'")
            image = read_pgm(root / record["image"])
            labels = {k: int(v) for k, v in record["labels"].items()}
            side, severity = _side_severity_from_labels(labels)
            samples.append(Sample(image, record["report"], labels, side, severity))
    return samples


def save_vocab(vocab: Vocabulary, path: Path) -> None:
    Path(path).write_text("\n".join(vocab.tokens_in_order()) + "\n", encoding="utf-8")


def load_vocab(path: Path) -> Vocabulary:
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
        raise DataIOError(f"vocab file {path} does not start with the special tokens")
    return Vocabulary({tok: i for i, tok in enumerate(tokens)})
