"""Three-axis evaluation: Frechet distance on pooled features, AUROC
alignment against generation-time labels, and wall-clock latency."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .clip import CLIPModel, images_to_tensor
from .data import LABEL_KEYS, Sample
from .errors import ConfigError


@dataclass
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def full_rank_estimate(self) -> bool:
        return self.count >= self.mean.shape[0] + 1


def fit_frechet(features: np.ndarray) -> FrechetStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"need an (N>=2, d) feature matrix, got shape {features.shape}")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return FrechetStats(mean, cov, features.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """||mu_a-mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), floored at 0.

    The cross term uses the symmetric form sqrt(A^{1/2} B A^{1/2}) via
    eigendecomposition with negative eigenvalues clamped at zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    a_half = _psd_sqrt(a.cov)
    inner = a_half @ b.cov @ a_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    cross = 2.0 * np.sqrt(np.clip(vals, 0.0, None)).sum()
    dist = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - cross)
    return max(dist, 0.0)


def clip_image_features(clip_model: CLIPModel, images: np.ndarray,
                        batch: int = 256) -> np.ndarray:
    """Pooled image-encoder features, the desk-scale FID embedding."""
    x = images_to_tensor(images)
    out = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch):
            out.append(clip_model.image(x[start : start + batch]).numpy())
    return np.concatenate(out).astype(np.float64)


def fid(real_images: np.ndarray, generated_images: np.ndarray, feature_extractor) -> float:
    if len(real_images) == 0 or len(generated_images) == 0:
        raise ValueError("both image sets must be nonempty")
    return frechet_distance(fit_frechet(feature_extractor(real_images)),
                            fit_frechet(feature_extractor(generated_images)))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Toy multi-label finding classifier (stands in for an external CXR classifier)


class FindingClassifier(nn.Module):
    def __init__(self, image_size: int = 32, n_labels: int = len(LABEL_KEYS)):
        super().__init__()
        self.image_size = image_size
        self.conv1 = nn.Conv2d(1, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.head = nn.Linear(64, n_labels)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.conv1(images))
        x = F.gelu(self.conv2(x))
        x = F.gelu(self.conv3(x))
        return self.head(x.mean(dim=(2, 3)))

    @torch.no_grad()
    def probabilities(self, images: np.ndarray) -> np.ndarray:
        """(N, S, S) [0,1] images -> (N, n_labels) sigmoid scores."""
        return torch.sigmoid(self(images_to_tensor(images))).numpy()


def train_classifier(samples: list[Sample], seed: int = 0, epochs: int = 20,
                     batch: int = 64, lr: float = 1e-3) -> FindingClassifier:
    from .trainer import fit

    torch.manual_seed(seed + 17)
    model = FindingClassifier(image_size=samples[0].image.shape[0])
    images = images_to_tensor(np.stack([s.image for s in samples]))
    targets = torch.tensor([[s.labels[k] for k in LABEL_KEYS] for s in samples],
                           dtype=torch.float32)

    def batches(epoch: int):
        g = torch.Generator().manual_seed(seed * 7919 + epoch)
        order = torch.randperm(len(samples), generator=g)
        for start in range(0, len(samples), batch):
            yield order[start : start + batch]

    def loss_fn(m, idx):
        return F.binary_cross_entropy_with_logits(m(images[idx]), targets[idx])

    fit(model, batches, loss_fn, epochs, lr)
    model.eval()
    return model


def alignment_eval(pipeline, test_samples: list[Sample],
                   classifier: FindingClassifier, steps: int = 50,
                   seed: int = 0, batch: int = 64) -> dict[str, float]:
    """Generate one image per test report, score with the classifier, and
    compute per-label AUROC plus the average."""
    reports = [s.report for s in test_samples]
    seeds = [seed * 1_000_003 + i for i in range(len(test_samples))]
    images = []
    for start in range(0, len(reports), batch):
        images.append(pipeline.generate_batch(reports[start : start + batch],
                                              seeds[start : start + batch], steps))
    gen = np.concatenate(images)
    probs = classifier.probabilities(gen)
    table: dict[str, float] = {}
    for j, key in enumerate(LABEL_KEYS):
        labels = np.array([s.labels[key] for s in test_samples])
        table[key] = auroc(probs[:, j], labels)
    table["avg"] = float(np.mean([table[k] for k in LABEL_KEYS]))
    return table


@dataclass
class LatencyReport:
    seconds_per_image: float
    steps: int
    n_trials: int

    @property
    def low_confidence(self) -> bool:
        return self.n_trials < 3


def measure_latency(pipeline, steps: int = 50, n_trials: int = 5,
                    report: str = "no acute findings.") -> LatencyReport:
    """Median wall-clock seconds for single-image generation."""
    if n_trials < 1:
        raise ConfigError(f"n_trials must be >= 1, got {n_trials}")
    times = []
    for trial in range(n_trials):
        start = time.perf_counter()
        pipeline.generate(report, seed=trial, steps=steps)
        times.append(time.perf_counter() - start)
    return LatencyReport(float(np.median(times)), steps, n_trials)
