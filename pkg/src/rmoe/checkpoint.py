"""Self-describing binary checkpoints.

Layout::

    magic  b"RMOE"            4 bytes
    version                   u16 LE
    reserved                  u16 LE (zero)
    metadata length           u32 LE
    metadata CRC-32           u32 LE
    metadata                  UTF-8 JSON
    payload                   f32 LE tensor blobs, row-major, in directory order

The metadata carries the encoder config, step, normalisation statistics and a
tensor directory (name, shape, offset, byte length, CRC-32 per tensor).
Optimizer moments are stored as ``adam.m.*`` / ``adam.v.*`` tensors.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NormStats
from .model import EncoderConfig, RMoEModel, skeleton
from .train import AdamState, TrainConfig, TrainState

MAGIC = b"RMOE"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class DirectoryError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: RMoEModel
    step: int = 0
    norm: NormStats | None = None
    optimizer: AdamState | None = None
    activation_stats: dict | None = None
    train_config: TrainConfig | None = None
    extra: dict | None = None

    def to_state(self) -> TrainState:
        opt = self.optimizer or AdamState.zeros_like(self.model.named_tensors())
        return TrainState(self.model, opt, self.norm, self.step, self.train_config)

    @classmethod
    def from_state(cls, state: TrainState, **kw) -> "Checkpoint":
        return cls(state.model, state.step, state.norm, state.optimizer, train_config=state.config, **kw)


def _blobs(ckpt: Checkpoint):
    for name, arr in ckpt.model.named_tensors().items():
        yield f"model.{name}", arr
    if ckpt.optimizer is not None:
        for name, arr in ckpt.optimizer.m.items():
            yield f"adam.m.{name}", arr
        for name, arr in ckpt.optimizer.v.items():
            yield f"adam.v.{name}", arr


def save_checkpoint(ckpt: Checkpoint | TrainState, path) -> None:
    if isinstance(ckpt, TrainState):
        ckpt = Checkpoint.from_state(ckpt)
    directory, chunks, offset = [], [], 0
    for name, arr in _blobs(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "config": ckpt.model.config.to_dict(),
        "step": ckpt.step,
        "norm_stats": ckpt.norm.to_dict() if ckpt.norm is not None else None,
        "optimizer": {"t": ckpt.optimizer.t} if ckpt.optimizer is not None else None,
        "activation_stats": ckpt.activation_stats,
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config is not None else None,
        "extra": ckpt.extra,
        "tensors": directory,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    header = _HEADER.pack(MAGIC, VERSION, 0, len(meta_bytes), zlib.crc32(meta_bytes))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(meta_bytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: file shorter than header")
    magic, version, reserved, meta_len, meta_crc = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if reserved != 0:
        raise CheckpointError(f"{path}: reserved header field is {reserved}, expected 0")
    meta_bytes = blob[_HEADER.size:_HEADER.size + meta_len]
    if len(meta_bytes) != meta_len:
        raise CheckpointError(f"{path}: metadata truncated")
    if zlib.crc32(meta_bytes) != meta_crc:
        raise ChecksumError(f"{path}: metadata checksum mismatch")
    meta = json.loads(meta_bytes)
    payload = memoryview(blob)[_HEADER.size + meta_len:]

    tensors, expected = {}, 0
    for entry in meta["tensors"]:
        if entry["offset"] != expected:
            raise DirectoryError(f"{path}: tensor {entry['name']} at offset {entry['offset']}, expected {expected}")
        n = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if entry["nbytes"] != n:
            raise DirectoryError(f"{path}: tensor {entry['name']} size disagrees with its shape")
        raw = bytes(payload[expected:expected + n])
        if len(raw) != n:
            raise CheckpointError(f"{path}: payload truncated in {entry['name']}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"{path}: checksum mismatch in tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        expected += n
    if expected != len(payload):
        raise DirectoryError(f"{path}: {len(payload) - expected} payload bytes not covered by the directory")

    config = EncoderConfig.from_dict(meta["config"])
    shell = skeleton(config)
    model_tensors = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    if set(model_tensors) != set(shell.named_tensors()):
        diff = set(model_tensors) ^ set(shell.named_tensors())
        raise DirectoryError(f"{path}: tensor directory does not match config: {sorted(diff)[:5]}")
    for name, ref in shell.named_tensors().items():
        if model_tensors[name].shape != ref.shape:
            raise DirectoryError(f"{path}: {name} has shape {model_tensors[name].shape}, config implies {ref.shape}")
    model = shell.with_tensors(model_tensors)

    optimizer = None
    expected_names = {f"model.{k}" for k in model_tensors}
    if meta.get("optimizer") is not None:
        names = model_tensors.keys()
        expected_names |= {f"adam.{part}.{k}" for part in "mv" for k in names}
    if set(tensors) != expected_names:
        diff = set(tensors) ^ expected_names
        raise DirectoryError(f"{path}: tensor directory entries missing or unexpected: {sorted(diff)[:5]}")
    if meta.get("optimizer") is not None:
        optimizer = AdamState(
            {k: tensors[f"adam.m.{k}"] for k in names},
            {k: tensors[f"adam.v.{k}"] for k in names},
            int(meta["optimizer"]["t"]),
        )
    norm = NormStats.from_dict(meta["norm_stats"]) if meta.get("norm_stats") else None
    tc = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    return Checkpoint(model, int(meta["step"]), norm, optimizer, meta.get("activation_stats"), tc, meta.get("extra"))
