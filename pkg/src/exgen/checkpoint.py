"""Versioned binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"RCEG"
    version u32      currently 1
    config  u32 length + UTF-8 JSON (model config, vocab tokens, head flags)
    table   u32 tensor count, then per tensor:
              u32 name length + name, u32 ndim, u64 dims..., f64 data (row-major)
    digest  32-byte SHA-256 of everything before it

Doubles round-trip bit-exactly, so load(save(m)) reproduces the model
including adapters and heads.  A truncated or altered file fails the
digest check before any state is returned.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, TinyLM
from .vocab import Vocab

MAGIC = b"RCEG"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    """The file declares a format version this build cannot read."""


class CheckpointCorruptError(CheckpointError):
    """The file is truncated, altered, or structurally invalid."""


def checkpoint_save(model: TinyLM, path: str | Path) -> None:
    """Write the model (config, vocab, every named tensor) to ``path``."""
    chunks: list[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    config = {
        "model": model.config.to_dict(),
        "vocab": list(model.vocab.tokens),
        "reward_head": model.has_reward_head,
        "value_head": model.has_value_head,
    }
    blob = json.dumps(config, ensure_ascii=False).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)

    named = list(model.named_parameters())
    chunks.append(struct.pack("<I", len(named)))
    for name, param in named:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", param.dim()))
        for d in param.shape:
            chunks.append(struct.pack("<Q", d))
        chunks.append(param.detach().numpy().astype("<f8").tobytes(order="C"))

    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError("unexpected end of checkpoint data")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def checkpoint_load(path: str | Path) -> TinyLM:
    """Reconstruct a model from ``path``.

    Raises :class:`CheckpointVersionError` on a version tag this build does
    not understand and :class:`CheckpointCorruptError` on any truncation,
    checksum mismatch, or malformed table entry.  No partial state escapes
    a failed load.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 32:
        raise CheckpointCorruptError("file too short to be a checkpoint")
    payload, digest = raw[:-32], raw[-32:]
    if payload[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("bad magic bytes")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointCorruptError("checksum mismatch (truncated or altered file)")

    r = _Reader(payload)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} not supported (expected {FORMAT_VERSION})"
        )
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
        model_cfg = ModelConfig(**config["model"])
        vocab = Vocab(tokens=tuple(config["vocab"]))
    except CheckpointCorruptError:
        raise
    except Exception as exc:
        raise CheckpointCorruptError(f"malformed config block: {exc}") from exc

    model = TinyLM(model_cfg, vocab, seed=0)
    if config.get("reward_head"):
        model.add_reward_head()
    if config.get("value_head"):
        model.add_value_head()
    expected = dict(model.named_parameters())

    count = r.u32()
    seen = set()
    with torch.no_grad():
        for _ in range(count):
            name = r.take(r.u32()).decode("utf-8")
            ndim = r.u32()
            shape = tuple(r.u64() for _ in range(ndim))
            numel = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(r.take(numel * 8), dtype="<f8").reshape(shape)
            if name not in expected:
                raise CheckpointCorruptError(f"unknown tensor {name!r} in table")
            if tuple(expected[name].shape) != shape:
                raise CheckpointCorruptError(
                    f"tensor {name!r} has shape {shape}, "
                    f"expected {tuple(expected[name].shape)}"
                )
            expected[name].copy_(torch.from_numpy(data.copy()))
            seen.add(name)
    if seen != set(expected):
        missing = sorted(set(expected) - seen)
        raise CheckpointCorruptError(f"checkpoint missing tensors: {missing}")
    if r.pos != len(payload):
        raise CheckpointCorruptError("trailing bytes after tensor table")
    return model


def checkpoint_id(path: str | Path) -> str:
    """Short content hash identifying a checkpoint file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
