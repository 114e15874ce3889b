"""Shared optimization loop, checkpoint format, and reproducibility plumbing."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import DataIOError, NumericError

MAGIC = b"CDIF"
VERSION = 1
DTYPE_F32 = 0


@dataclass
class TrainConfig:
    stage: str  # clip | autoencoder | denoiser
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    grad_clip: float = 1.0
    ckpt_dir: Path = Path("ckpt")
    eval_interval: int = 50
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        self.ckpt_dir = Path(self.ckpt_dir)


class MetricsLog:
    """Append-only 'step <n> loss <float>' lines for test scraping."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, step: int, loss: float) -> None:
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(f"step {step} loss {loss:.8f}\n")


def fit(model: torch.nn.Module,
        batches: Callable[[int], Iterable],
        loss_fn: Callable[[torch.nn.Module, object], torch.Tensor],
        epochs: int,
        lr: float,
        grad_clip: float = 0.0,
        metrics: MetricsLog | None = None,
        eval_interval: int = 50,
        on_epoch_end: Callable[[int], None] | None = None) -> int:
    """Adam mini-batch loop (beta1=0.9, beta2=0.999, eps=1e-8); aborts on NaN.

    ``batches(epoch)`` yields batches; ``loss_fn(model, batch)`` returns a
    scalar. Returns the number of optimizer steps taken.
    """
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    step = 0
    for epoch in range(epochs):
        for batch in batches(epoch):
            loss = loss_fn(model, batch)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            if grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
            opt.step()
            if metrics is not None and (step % max(eval_interval, 1) == 0):
                metrics.log(step, float(loss.detach()))
            step += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch)
    return step


# ---------------------------------------------------------------------------
# Checkpoint binary format
#
#   magic "CDIF", u32 version, u32 tensor count;
#   per tensor: u32 name len, name, u8 dtype (0=f32), u8 rank, u32 dims[rank],
#   little-endian raw data; then u32 meta count and per entry u32 key len,
#   key, u32 value len, JSON-encoded value.


def state_tensors(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().astype(np.float32)
            for name, p in model.state_dict().items()}


def save_checkpoint(tensors: dict[str, np.ndarray], meta: dict, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d tensors 0-d
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<BB", DTYPE_F32, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", len(meta))
    for key, value in meta.items():
        kb = key.encode("utf-8")
        vb = json.dumps(value).encode("utf-8")
        buf += struct.pack("<I", len(kb)) + kb
        buf += struct.pack("<I", len(vb)) + vb
    path.write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataIOError(f"truncated checkpoint file: {self.path}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise DataIOError(f"bad checkpoint magic in {path}")
    version = r.u32()
    if version != VERSION:
        raise DataIOError(f"unsupported checkpoint version {version} in {path}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dtype = r.u8()
        if dtype != DTYPE_F32:
            raise DataIOError(f"unknown dtype code {dtype} for tensor '{name}' in {path}")
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name in tensors:
            raise DataIOError(f"duplicate tensor name '{name}' in {path}")
        tensors[name] = arr.copy()
    meta: dict = {}
    for _ in range(r.u32()):
        key = r.take(r.u32()).decode("utf-8")
        meta[key] = json.loads(r.take(r.u32()).decode("utf-8"))
    return tensors, meta


def load_into(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    for name, current in state.items():
        if name not in tensors:
            raise DataIOError(f"checkpoint missing tensor '{name}'")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(current.shape):
            raise DataIOError(
                f"tensor '{name}' shape {tuple(arr.shape)} does not match "
                f"model shape {tuple(current.shape)}"
            )
    model.load_state_dict({name: torch.from_numpy(tensors[name].copy())
                           for name in state})


def params_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(state_tensors(model).items()):
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()
