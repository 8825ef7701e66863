"""
Checkpoint container and its binary file format.

Layout (little-endian)::

    magic "RFL1" | version u32
    block length u32 | JSON config block (encoder config, seed, epoch, rng
        state, metadata, array manifests)
    parameter arrays (float32, declaration order)
    optimizer arrays (float32, manifest order)
    CRC32 u32 of every preceding byte

Only ``config`` is required in the block. Without a ``params`` manifest the
arrays follow the encoder's declaration order; the other fields default to an
untrained, epoch 0 state with no optimizer arrays. The expected file size is
known once the block is read, so a short file is reported as truncated before
the checksum is compared.
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
)
from .model import EncoderConfig, EncoderParams, param_shapes

logger = logging.getLogger(__name__)

MAGIC = b"RFL1"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sI")
_BLOCK_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: EncoderParams
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    epoch: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def same_as(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every field."""
        if (self.config, self.seed, self.rng_state, self.epoch, self.metadata, self.version) != (
            other.config, other.seed, other.rng_state, other.epoch, other.metadata, other.version
        ):
            return False
        if not self.params.same_as(other.params):
            return False
        if list(self.optimizer_state) != list(other.optimizer_state):
            return False
        return all(
            np.array_equal(self.optimizer_state[k], other.optimizer_state[k]) for k in self.optimizer_state
        )


def _manifest(arrays: Dict[str, np.ndarray]) -> List[Tuple[str, List[int]]]:
    return [(name, [int(d) for d in arr.shape]) for name, arr in arrays.items()]


def to_bytes(ckpt: Checkpoint) -> bytes:
    params = ckpt.params.arrays()
    optimizer = {k: np.asarray(v, dtype=np.float32) for k, v in ckpt.optimizer_state.items()}
    block = {
        "config": ckpt.config.to_dict(),
        "seed": int(ckpt.seed),
        "epoch": int(ckpt.epoch),
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "params": _manifest(params),
        "optimizer": _manifest(optimizer),
    }
    encoded = json.dumps(block, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, ckpt.version), _BLOCK_LEN.pack(len(encoded)), encoded]
    for arr in list(params.values()) + list(optimizer.values()):
        parts.append(np.ascontiguousarray(arr, dtype=_FLOAT).tobytes())
    head = b"".join(parts)
    return head + _CRC.pack(zlib.crc32(head) & 0xFFFFFFFF)


def _checksum_ok(data: bytes) -> bool:
    (stored,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    return zlib.crc32(data[: len(data) - _CRC.size]) & 0xFFFFFFFF == stored


def _array_bytes(manifest) -> int:
    return sum(int(np.prod(shape, dtype=np.int64)) for _, shape in manifest) * _FLOAT.itemsize


def from_bytes(data: bytes) -> Checkpoint:
    prefix = _HEADER.size + _BLOCK_LEN.size
    if len(data) < prefix:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, shorter than the header")
    magic, version = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    (block_len,) = _BLOCK_LEN.unpack_from(data, _HEADER.size)
    if len(data) < prefix + block_len + _CRC.size:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, the config block alone needs {block_len}")

    try:
        block = json.loads(data[prefix: prefix + block_len].decode("utf-8"))
        config = EncoderConfig.from_dict(block["config"])
        params_manifest = block.get("params") or [[n, list(s)] for n, s in param_shapes(config)]
        optimizer_manifest = block.get("optimizer", [])
    except (UnicodeDecodeError, ValueError, TypeError, KeyError) as e:
        if not _checksum_ok(data):
            raise CheckpointChecksumError("CRC32 mismatch; the file is corrupted") from None
        raise CheckpointFormatError(f"unreadable config block: {e}") from None

    expected = prefix + block_len + _array_bytes(params_manifest) + _array_bytes(optimizer_manifest) + _CRC.size
    if len(data) < expected:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, its config block declares {expected}")
    if len(data) > expected:
        raise CheckpointFormatError(f"{len(data) - expected} trailing bytes after the checksum")
    if not _checksum_ok(data):
        raise CheckpointChecksumError("CRC32 mismatch; the file is corrupted")

    offset = prefix + block_len

    def read_arrays(manifest) -> Dict[str, np.ndarray]:
        nonlocal offset
        out: Dict[str, np.ndarray] = {}
        for name, shape in manifest:
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype=_FLOAT, count=count, offset=offset)
            out[name] = arr.astype(np.float32).reshape(shape)
            offset += count * _FLOAT.itemsize
        return out

    try:
        params = EncoderParams(config, read_arrays(params_manifest))
    except ContractError as e:
        raise CheckpointFormatError(f"parameter arrays do not match the encoder config: {e}") from None
    optimizer = read_arrays(optimizer_manifest)
    return Checkpoint(
        config=config,
        params=params,
        optimizer_state=optimizer,
        seed=block.get("seed", 0),
        rng_state=block.get("rng_state"),
        epoch=block.get("epoch", 0),
        metadata=block.get("metadata", {}),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(to_bytes(ckpt))
    os.replace(tmp, path)
    logger.debug("saved checkpoint %s (epoch %d)", path, ckpt.epoch)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read())
