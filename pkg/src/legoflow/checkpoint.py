"""Single-file binary checkpoint container.

Layout, all little-endian:

    magic "LGFW" | u32 version | 32-byte sha256 of config text
    u64 len + config text (utf-8)
    u64 step
    u64 len + model structure JSON
    u32 param count, then per parameter:
        u16 id len + id | u8 flags (1=trainable, 2=decay) | u8 ndim
        u32 dims... | raw float32 values | raw float32 momentum
    u32 buffer count, then per buffer (BN running stats):
        u16 id len + id | u8 ndim | u32 dims... | raw float32 values
    u64 len + batch-stream state JSON (sorted keys)

Float payloads are raw bits, so save -> load -> save reproduces the file
byte for byte and a loaded model forwards bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

MAGIC = b"LGFW"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointData:
    version: int
    config_hash: bytes
    config_text: str
    step: int
    structure: dict
    params: Dict[str, dict]
    buffers: Dict[str, np.ndarray]
    streams: dict


def _pack_str(out: bytearray, s: str) -> None:
    raw = s.encode()
    out += struct.pack("<H", len(raw))
    out += raw


def _pack_blob(out: bytearray, raw: bytes) -> None:
    out += struct.pack("<Q", len(raw))
    out += raw


def _pack_array(out: bytearray, arr: np.ndarray) -> None:
    out += struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode()

    def blob(self) -> bytes:
        return self.take(self.u64())

    def array(self) -> np.ndarray:
        ndim = self.u8()
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4")
        return data.reshape(shape).copy()


def serialize(trainer, config_text: str) -> bytes:
    model = trainer.model
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    cfg_raw = config_text.encode()
    out += hashlib.sha256(cfg_raw).digest()
    _pack_blob(out, cfg_raw)
    out += struct.pack("<Q", trainer.step)

    structure = {
        "dim": model.backbone.dim,
        "n_layers": model.backbone.n_layers,
        "n_units": model.backbone.n_units,
        "residual": model.backbone.layers[0].units[0].residual,
        "tasks": [
            {
                "name": name,
                "input_dim": model.stems[name].input_dim,
                "head_kind": model.heads[name].kind,
                "head_shape": list(model.heads[name].head_shape),
            }
            for name in model.task_order
        ],
    }
    _pack_blob(out, json.dumps(structure, sort_keys=True).encode())

    params = model.params()
    out += struct.pack("<I", len(params))
    for p in params:
        _pack_str(out, p.id)
        out += struct.pack("<B", (1 if p.trainable else 0) | (2 if p.decay else 0))
        _pack_array(out, p.value)
        _pack_array(out, p.momentum)

    buffers = []
    for layer in model.backbone.layers:
        for unit in layer.units:
            buffers.append((f"{unit.name}.bn.running_mean", unit.running_mean))
            buffers.append((f"{unit.name}.bn.running_var", unit.running_var))
    out += struct.pack("<I", len(buffers))
    for name, arr in buffers:
        _pack_str(out, name)
        _pack_array(out, arr)

    streams = {str(slot.worker_id): slot.stream_states() for slot in trainer.slots}
    _pack_blob(out, json.dumps(streams, sort_keys=True).encode())
    return bytes(out)


def save_checkpoint(path: str, trainer, config_text: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(trainer, config_text))


def load_checkpoint(path: str) -> CheckpointData:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a legoflow checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_hash = r.take(32)
    config_text = r.blob().decode()
    if hashlib.sha256(config_text.encode()).digest() != config_hash:
        raise CheckpointError("config hash mismatch")
    step = r.u64()
    structure = json.loads(r.blob().decode())
    params: Dict[str, dict] = {}
    for _ in range(r.u32()):
        pid = r.string()
        flags = r.u8()
        value = r.array()
        momentum = r.array()
        params[pid] = {"value": value, "momentum": momentum,
                       "trainable": bool(flags & 1), "decay": bool(flags & 2)}
    buffers: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.string()
        buffers[name] = r.array()
    streams = json.loads(r.blob().decode())
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes in checkpoint")
    return CheckpointData(version, config_hash, config_text, step, structure,
                          params, buffers, streams)


def apply_to_model(ckpt: CheckpointData, model) -> None:
    """Overwrite model arrays in place from checkpoint entries."""
    live = model.param_map()
    if set(live) != set(ckpt.params):
        missing = set(ckpt.params) ^ set(live)
        raise CheckpointError(f"parameter set mismatch: {sorted(missing)[:4]}...")
    for pid, entry in ckpt.params.items():
        p = live[pid]
        if p.value.shape != entry["value"].shape:
            raise CheckpointError(f"shape mismatch for {pid}")
        p.value[...] = entry["value"]
        p.momentum[...] = entry["momentum"]
        p.trainable = entry["trainable"]
        p.decay = entry["decay"]
    for layer in model.backbone.layers:
        for unit in layer.units:
            unit.running_mean[...] = ckpt.buffers[f"{unit.name}.bn.running_mean"]
            unit.running_var[...] = ckpt.buffers[f"{unit.name}.bn.running_var"]


def apply_to_trainer(ckpt: CheckpointData, trainer) -> None:
    apply_to_model(ckpt, trainer.model)
    trainer.step = ckpt.step
    for slot in trainer.slots:
        states = ckpt.streams.get(str(slot.worker_id))
        if states is None:
            raise CheckpointError(f"no stream state for worker {slot.worker_id}")
        slot.restore_streams(states)


def model_from_checkpoint(ckpt: CheckpointData):
    """Rebuild the model purely from the stored structure and parameters."""
    from .model import MultiTaskModel

    model = MultiTaskModel.from_structure(ckpt.structure)
    apply_to_model(ckpt, model)
    return model
