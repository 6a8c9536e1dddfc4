"""Binary checkpoint format for a ModelSet.

Layout (all integers little-endian)::

    magic  b"DMADACKP"
    u32    format version
    u32    parameter count
    per parameter:
        u32    name length, then UTF-8 name bytes
        u32    rank, then rank x u64 dimensions
        f64    payload, row-major

Files are written to a temporary sibling and renamed into place, so an
interrupted write never replaces the previous checkpoint.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from services.trainer.networks import ModelSet
from shared.errors import CheckpointError
from shared.logging_config import get_logger

logger = get_logger(__name__)

MAGIC = b"DMADACKP"
FORMAT_VERSION = 1


def encode_parameters(params: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, value in params.items():
        raw_name = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(np.asarray(array.shape, dtype="<u8").tobytes())
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_parameters(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    offset = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError("checkpoint is truncated")
        chunk = blob[offset : offset + n]
        offset += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(int(d) for d in np.frombuffer(take(8 * rank), dtype="<u8"))
        size = int(np.prod(shape, dtype=np.int64))
        payload = np.frombuffer(take(8 * size), dtype="<f8")
        params[name] = payload.astype(np.float64).reshape(shape)
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after last parameter")
    return params


def save_checkpoint(models: ModelSet, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_parameters({name: p.data for name, p in models.parameters().items()})
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    logger.debug("checkpoint_saved", path=str(path), bytes=len(blob))
    return path


def load_checkpoint(models: ModelSet, path: Path) -> ModelSet:
    """Copy parameters from ``path`` into ``models`` in place."""
    try:
        params = decode_parameters(path.read_bytes())
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    expected = models.parameters()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, extra {extra})")
    for name, param in expected.items():
        if params[name].shape != param.shape:
            raise CheckpointError(
                f"{path}: '{name}' has shape {params[name].shape}, model expects {param.shape}"
            )
        param.data[...] = params[name]
    return models
