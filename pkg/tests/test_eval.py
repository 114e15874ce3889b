import itertools
import math

import numpy as np
import pytest
import torch

from cxrdiff.errors import ConfigError
from cxrdiff.metrics import (FrechetStats, LatencyReport, auroc, fid,
                             fit_frechet, frechet_distance)
from cxrdiff.profiler import (OpCounter, UViTConfig, count_flops, count_params,
                              measured_flops, measured_params,
                              peak_activation_elements, profile)
from cxrdiff.uvit import UViT


class TestFrechetFit:
    def test_identical_rows_zero_cov(self):
        feats = np.tile(np.array([1.0, 2.0, 3.0]), (5, 1))
        stats = fit_frechet(feats)
        assert np.allclose(stats.mean, [1.0, 2.0, 3.0])
        assert np.allclose(stats.cov, 0.0)

    def test_hand_moments(self):
        stats = fit_frechet(np.array([[0.0, 0.0], [2.0, 0.0]]))
        assert np.allclose(stats.mean, [1.0, 0.0])
        # unbiased: var = ((0-1)^2 + (2-1)^2) / (2-1) = 2
        assert np.allclose(stats.cov, [[2.0, 0.0], [0.0, 0.0]])

    def test_rank_flag(self):
        rng = np.random.default_rng(0)
        assert not fit_frechet(rng.random((3, 4))).full_rank_estimate
        assert fit_frechet(rng.random((5, 4))).full_rank_estimate

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            fit_frechet(np.zeros((1, 3)))


class TestFrechetDistance:
    def stats(self, mean, cov):
        mean = np.asarray(mean, dtype=np.float64)
        return FrechetStats(mean, np.asarray(cov, dtype=np.float64), 100)

    def test_mean_shift_only(self):
        # N(0, I) vs N(1, I) in d=1: distance = 1
        a = self.stats([0.0], [[1.0]])
        b = self.stats([1.0], [[1.0]])
        assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_variance_only(self):
        # N(0, 1) vs N(0, 4): 1 + 4 - 2*sqrt(4) = 1
        a = self.stats([0.0], [[1.0]])
        b = self.stats([0.0], [[4.0]])
        assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal_2d(self):
        # sums per-coordinate contributions for diagonal covariances
        a = self.stats([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
        b = self.stats([3.0, 0.0], [[1.0, 0.0], [0.0, 9.0]])
        expected = 9.0 + (1 + 9 - 2 * 3)
        assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-10)

    def test_symmetry_and_zero(self):
        rng = np.random.default_rng(1)
        x = rng.random((50, 4))
        y = rng.random((60, 4)) + 0.3
        sa, sb = fit_frechet(x), fit_frechet(y)
        assert frechet_distance(sa, sb) == pytest.approx(frechet_distance(sb, sa), rel=1e-9)
        assert frechet_distance(sa, sa) == pytest.approx(0.0, abs=1e-10)
        assert frechet_distance(sa, sb) > 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            frechet_distance(self.stats([0.0], [[1.0]]),
                             self.stats([0.0, 0.0], np.eye(2)))


class TestFid:
    def test_same_set_near_zero(self):
        rng = np.random.default_rng(2)
        imgs = rng.random((64, 8, 8)).astype(np.float32)
        extractor = lambda ims: ims.reshape(len(ims), -1)[:, :6].astype(np.float64)
        assert fid(imgs, imgs.copy(), extractor) < 1e-8

    def test_duplication_invariance(self):
        rng = np.random.default_rng(3)
        a = rng.random((40, 8, 8)).astype(np.float32)
        b = rng.random((40, 8, 8)).astype(np.float32)
        extractor = lambda ims: ims.reshape(len(ims), -1)[:, :5].astype(np.float64)
        base = fid(a, b, extractor)
        doubled = fid(a, np.concatenate([b, b]), extractor)
        # doubling only reweights the unbiased covariance by (2N-1)/(2N-2) vs
        # (N-1)/(N-2) style factors; the distance moves very little
        assert abs(base - doubled) < 0.05 * max(base, 1e-12)

    def test_empty_rejected(self):
        imgs = np.zeros((4, 8, 8), dtype=np.float32)
        with pytest.raises(ValueError):
            fid(imgs[:0], imgs, lambda x: x.reshape(len(x), -1))


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_perfectly_wrong(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0

    def test_all_tied_is_half(self):
        assert auroc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_hand_value(self):
        # pairs: (0.8>0.6), (0.8>0.2), (0.4<0.6), (0.4>0.2) -> 3/4
        assert auroc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75

    def test_brute_force_pair_counting(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(4, 21))
            scores = np.round(rng.random(n), 1)  # coarse grid forces ties
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            wins = 0.0
            total = 0
            for i, j in itertools.product(range(n), range(n)):
                if labels[i] == 1 and labels[j] == 0:
                    total += 1
                    if scores[i] > scores[j]:
                        wins += 1.0
                    elif scores[i] == scores[j]:
                        wins += 0.5
            assert auroc(scores, labels) == pytest.approx(wins / total, abs=1e-12)

    def test_complement_law(self):
        rng = np.random.default_rng(5)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        scores = rng.random(25)
        labels = rng.integers(0, 2, 25)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) == auroc(np.exp(3 * scores), labels)

    def test_degenerate_labels(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [0, 1, 1])


class TestCostModel:
    def test_block_param_oracle(self):
        # one transformer block at width 128: qkv (128*384+384) + out
        # (128*128+128) + mlp (128*512+512 + 512*128+128) + 2 norms (2*2*128)
        D = 128
        expected = (D * 3 * D + 3 * D) + (D * D + D) + \
            (D * 4 * D + 4 * D) + (4 * D * D + D) + 4 * D
        assert expected == 12 * D * D + 13 * D == 198272

    def test_params_match_measured(self):
        for cfg in (UViTConfig(),
                    UViTConfig(dim=32, heads=2, enc_blocks=2, mid_blocks=1,
                               text_len=16, text_dim=16, time_embed_dim=16)):
            assert count_params(cfg) == measured_params(UViT(cfg))

    def test_flops_match_measured(self):
        cfg = UViTConfig(dim=32, heads=2, enc_blocks=2, mid_blocks=1,
                         text_len=16, text_dim=16, time_embed_dim=16,
                         mask_text_keys=False)
        for batch in (1, 4):
            flops, peak = measured_flops(cfg, batch)
            assert flops == count_flops(cfg, batch)
            assert peak == peak_activation_elements(cfg, batch)

    def test_flops_linear_in_batch(self):
        cfg = UViTConfig()
        f1 = count_flops(cfg, 1)
        assert count_flops(cfg, 4) == 4 * f1
        assert count_flops(cfg, 7) == 7 * f1

    def test_params_independent_of_batch(self):
        cfg = UViTConfig()
        report_a = profile(cfg, batch=1)
        report_b = profile(cfg, batch=8)
        assert report_a.params == report_b.params

    def test_invalid_batch(self):
        with pytest.raises(ConfigError):
            count_flops(UViTConfig(), 0)

    def test_op_counter_linear_rule(self):
        lin = torch.nn.Linear(10, 3)
        with OpCounter(lin) as counter, torch.no_grad():
            lin(torch.zeros(5, 10))
        assert counter.flops == 2 * 5 * 3 * 10
        assert counter.peak == 15


def test_latency_report_confidence():
    assert LatencyReport(0.1, 50, 2).low_confidence
    assert not LatencyReport(0.1, 50, 5).low_confidence
