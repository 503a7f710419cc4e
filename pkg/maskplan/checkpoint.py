"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header, then one
little-endian float64 block per parameter in manifest order.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import numpy as np

from . import __version__
from .artifacts import atomic_write_bytes

logger = logging.getLogger(__name__)

UNET_MAGIC = b"MPUNET01"
CLASSIFIER_MAGIC = b"MPCLSF01"
FORMAT_VERSION = 1

_LENGTH = struct.Struct("<I")


class CheckpointError(RuntimeError):
    """Unreadable, mismatched or unwritable checkpoint."""


@dataclass(frozen=True)
class Checkpoint:
    magic: bytes
    header: Dict[str, Any]
    params: Dict[str, np.ndarray]

    @property
    def config(self) -> Dict[str, Any]:
        return self.header.get("config", {})

    @property
    def extra(self) -> Dict[str, Any]:
        return self.header.get("extra", {})


def encode_checkpoint(
    magic: bytes,
    params: Mapping[str, np.ndarray],
    config: Mapping[str, Any],
    extra: Optional[Mapping[str, Any]] = None,
    config_hash: Optional[str] = None,
) -> bytes:
    manifest = [{"name": name, "shape": list(np.shape(value))} for name, value in params.items()]
    header = {
        "format_version": FORMAT_VERSION,
        "tool": "maskplan",
        "version": __version__,
        "config_hash": config_hash,
        "config": dict(config),
        "extra": dict(extra or {}),
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blocks = [np.ascontiguousarray(value, dtype="<f8").tobytes() for value in params.values()]
    return magic + _LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(blocks)


def save_checkpoint(path: Path, magic: bytes, params: Mapping[str, np.ndarray], config: Mapping[str, Any], **kwargs) -> None:
    payload = encode_checkpoint(magic, params, config, **kwargs)
    try:
        atomic_write_bytes(Path(path), payload)
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc
    logger.info("Checkpoint written: %s (%d parameter blocks)", path, len(params))


def decode_checkpoint(payload: bytes, expected_magic: Optional[bytes] = None) -> Checkpoint:
    magic = payload[:8]
    if expected_magic is not None and magic != expected_magic:
        raise CheckpointError(f"bad magic {magic!r}, expected {expected_magic!r}")
    if magic not in (UNET_MAGIC, CLASSIFIER_MAGIC):
        raise CheckpointError(f"unknown checkpoint magic {magic!r}")
    if len(payload) < 8 + _LENGTH.size:
        raise CheckpointError("truncated checkpoint header")
    (header_length,) = _LENGTH.unpack_from(payload, 8)
    offset = 8 + _LENGTH.size
    try:
        header = json.loads(payload[offset : offset + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
    offset += header_length
    params: Dict[str, np.ndarray] = {}
    entries: List[Dict[str, Any]] = header.get("manifest", [])
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise CheckpointError(f"truncated parameter block '{entry['name']}'")
        params[entry["name"]] = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes after parameter blocks")
    return Checkpoint(magic=magic, header=header, params=params)


def load_checkpoint(path: Path, expected_magic: Optional[bytes] = None) -> Checkpoint:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(payload, expected_magic)
