import struct

import numpy as np
import pytest
import torch

from cxrdiff.errors import DataIOError, NumericError
from cxrdiff.trainer import (MAGIC, MetricsLog, TrainConfig, fit,
                             load_checkpoint, load_into, params_checksum,
                             save_checkpoint, state_tensors)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(stage="clip", batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(stage="clip", lr=0.0)


class TestCheckpointRoundtrip:
    def test_tensors_and_meta(self, tmp_path):
        path = tmp_path / "a.ckpt"
        tensors = {
            "w": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.array([1.5], dtype=np.float32),
            "scalar": np.float32(0.25),
        }
        meta = {"stage": "clip", "vocab": ["<pad>", "x"], "tau": 0.07}
        save_checkpoint(tensors, meta, path)
        loaded, loaded_meta = load_checkpoint(path)
        assert set(loaded) == {"w", "b", "scalar"}
        assert np.array_equal(loaded["w"], tensors["w"])
        assert loaded["scalar"].shape == ()
        assert float(loaded["scalar"]) == 0.25
        assert loaded_meta == meta

    def test_zero_dim_model_param(self, tmp_path):
        class Scalar(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.log_tau = torch.nn.Parameter(torch.tensor(-2.0))

        model = Scalar()
        path = tmp_path / "s.ckpt"
        save_checkpoint(state_tensors(model), {}, path)
        tensors, _ = load_checkpoint(path)
        fresh = Scalar()
        load_into(fresh, tensors)
        assert float(fresh.log_tau.detach()) == pytest.approx(-2.0)

    def test_byte_identical_saves(self, tmp_path):
        tensors = {"w": np.ones((4, 4), dtype=np.float32)}
        save_checkpoint(tensors, {"k": 1}, tmp_path / "x.ckpt")
        save_checkpoint(tensors, {"k": 1}, tmp_path / "y.ckpt")
        assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "h.ckpt"
        save_checkpoint({"t": np.zeros(2, dtype=np.float32)}, {}, path)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        version, count = struct.unpack("<II", raw[4:12])
        assert version == 1 and count == 1


class TestCheckpointErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(DataIOError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.ckpt"
        path.write_bytes(MAGIC + struct.pack("<II", 99, 0) + struct.pack("<I", 0))
        with pytest.raises(DataIOError, match="version"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint({"w": np.ones((8, 8), dtype=np.float32)}, {"a": 1}, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(DataIOError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch_names_tensor(self, tmp_path):
        model = torch.nn.Linear(3, 2)
        tensors = state_tensors(model)
        tensors["weight"] = np.zeros((2, 4), dtype=np.float32)
        with pytest.raises(DataIOError, match="weight"):
            load_into(model, tensors)

    def test_missing_tensor_named(self):
        model = torch.nn.Linear(3, 2)
        tensors = state_tensors(model)
        del tensors["bias"]
        with pytest.raises(DataIOError, match="bias"):
            load_into(model, tensors)


class TestChecksum:
    def test_stable_and_sensitive(self):
        torch.manual_seed(0)
        model = torch.nn.Linear(4, 4)
        before = params_checksum(model)
        assert params_checksum(model) == before
        with torch.no_grad():
            model.bias.add_(1.0)
        assert params_checksum(model) != before


class TestFit:
    def test_quadratic_converges(self):
        # minimize (w - 3)^2; Adam should land within 1e-3 of the optimum
        model = torch.nn.Module()
        model.w = torch.nn.Parameter(torch.tensor(0.0))

        def loss_fn(m, _batch):
            return (m.w - 3.0) ** 2

        steps = fit(model, lambda epoch: [None] * 100, loss_fn, epochs=20, lr=0.05)
        assert steps == 2000
        assert abs(float(model.w.detach()) - 3.0) < 1e-3

    def test_nan_loss_raises(self):
        model = torch.nn.Module()
        model.w = torch.nn.Parameter(torch.tensor(1.0))

        def loss_fn(m, _batch):
            return m.w * float("nan")

        with pytest.raises(NumericError):
            fit(model, lambda epoch: [None], loss_fn, epochs=1, lr=0.1)

    def test_grad_clip_bounds_step(self):
        # with grad norm clipped to c, one Adam step moves at most ~lr per coord
        model = torch.nn.Module()
        model.w = torch.nn.Parameter(torch.tensor(0.0))

        def loss_fn(m, _batch):
            return 1e6 * m.w

        fit(model, lambda epoch: [None], loss_fn, epochs=1, lr=0.1, grad_clip=1.0)
        assert abs(float(model.w.detach())) <= 0.1 + 1e-6

    def test_epoch_callback_and_metrics(self, tmp_path):
        model = torch.nn.Module()
        model.w = torch.nn.Parameter(torch.tensor(0.0))
        log_path = tmp_path / "m.txt"
        metrics = MetricsLog(log_path)
        seen = []
        fit(model, lambda epoch: [None] * 3, lambda m, b: (m.w - 1.0) ** 2,
            epochs=2, lr=0.01, metrics=metrics, eval_interval=2,
            on_epoch_end=seen.append)
        assert seen == [0, 1]
        lines = log_path.read_text().splitlines()
        assert lines
        for line in lines:
            parts = line.split()
            assert parts[0] == "step" and parts[2] == "loss"
            int(parts[1])
            float(parts[3])

    def test_deterministic_training_same_checkpoint(self, tmp_path):
        def run(path):
            torch.manual_seed(7)
            model = torch.nn.Linear(4, 4)
            g = torch.Generator().manual_seed(7)
            data = torch.randn(16, 4, generator=g)

            def loss_fn(m, batch):
                return torch.mean((m(batch) - batch) ** 2)

            fit(model, lambda epoch: [data], loss_fn, epochs=5, lr=1e-3)
            save_checkpoint(state_tensors(model), {}, path)

        run(tmp_path / "a.ckpt")
        run(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
