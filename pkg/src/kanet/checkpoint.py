"""KANC checkpoint container.

Layout (little-endian)::

    "KANC"  u32 version
    u32 n   n bytes of UTF-8 JSON (run configuration, sorted keys)
    u32 L   L f64 band means, L f64 band standard deviations
    u32 T   T tensor records in assembly order:
            u16 name length, name, u8 ndim, ndim x u32 extents, f64 values

Tensor names are ``<module>.<param or buffer>`` as listed by
``KANet.named_modules``. Values are stored as 64-bit reals so 32-bit
models round-trip exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import KANet, NetworkConfig

MAGIC = b"KANC"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    mean: np.ndarray
    std: np.ndarray
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(**self.config["network"])


def model_tensors(model: KANet) -> dict[str, np.ndarray]:
    out = {}
    for name, mod in model.named_modules():
        for store in (mod.params, mod.buffers):
            for key, value in store.items():
                out[f"{name}.{key}"] = value
    return out


def load_tensors(model: KANet, tensors: dict[str, np.ndarray]) -> KANet:
    """Copy stored tensors into ``model`` (cast to its dtype); names and shapes must match."""
    expected = model_tensors(model)
    if list(expected) != list(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise FormatError(f"checkpoint tensors do not match the model: {missing[:5]}")
    for name, mod in model.named_modules():
        for store in (mod.params, mod.buffers):
            for key in store:
                value = tensors[f"{name}.{key}"]
                if value.shape != store[key].shape:
                    raise FormatError(f"{name}.{key}: stored shape {value.shape} != model shape {store[key].shape}")
                store[key] = value.astype(model.dtype)
    return model


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta]
    parts += [struct.pack("<I", len(ckpt.mean)), np.asarray(ckpt.mean, "<f8").tobytes(),
              np.asarray(ckpt.std, "<f8").tobytes(), struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", value.ndim),
                  struct.pack(f"<{value.ndim}I", *value.shape), np.ascontiguousarray(value, "<f8").tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a KANC checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n,) = r.unpack("<I", "config length")
    start = r.pos
    try:
        config = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt config block: {exc}", start) from None
    (bands,) = r.unpack("<I", "band count")
    mean = np.frombuffer(r.take(8 * bands, "band means"), "<f8").astype(np.float64)
    std = np.frombuffer(r.take(8 * bands, "band deviations"), "<f8").astype(np.float64)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (length,) = r.unpack("<H", "tensor name length")
        name = r.take(length, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{ndim}I", f"extents of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * size, f"values of {name}"), "<f8").reshape(shape).copy()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last tensor", r.pos)
    return Checkpoint(config, mean, std, tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def restore_model(ckpt: Checkpoint, dtype=None) -> KANet:
    dtype = dtype or (np.float64 if ckpt.config.get("train", {}).get("precision") == 64 else np.float32)
    model = KANet(ckpt.network, seed=0, dtype=dtype)
    return load_tensors(model, ckpt.tensors)
