# app/core/checkpoint.py
"""Versioned binary checkpoint codec.

Layout::

    magic bytes | uint32 LE metadata length | metadata JSON (sorted keys) | float64 LE arrays

The metadata carries an ``arrays`` list of ``{"name", "shape"}`` entries in
payload order; every other key is owned by the caller.
"""
import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from app.core.errors import CheckpointError

_LENGTH = struct.Struct("<I")
_FLOAT = np.dtype("<f8")


def encode(magic: bytes, metadata: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    if "arrays" in metadata:
        raise CheckpointError("metadata key 'arrays' is reserved")
    names = list(arrays)
    header = dict(metadata)
    header["arrays"] = [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(arrays[n], dtype=_FLOAT).tobytes() for n in names)
    return magic + _LENGTH.pack(len(blob)) + blob + body


def decode(magic: bytes, payload: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if payload[: len(magic)] != magic:
        found = payload[: len(magic)]
        raise CheckpointError(f"bad checkpoint magic {found!r}, expected {magic!r}")
    offset = len(magic)
    if len(payload) < offset + _LENGTH.size:
        raise CheckpointError("checkpoint truncated inside the header")
    (length,) = _LENGTH.unpack_from(payload, offset)
    offset += _LENGTH.size
    if len(payload) < offset + length:
        raise CheckpointError("checkpoint truncated inside the metadata block")
    try:
        metadata = json.loads(payload[offset : offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    offset += length

    specs = metadata.pop("arrays", None)
    if not isinstance(specs, list):
        raise CheckpointError("checkpoint metadata has no array table")
    expected = offset + sum(int(np.prod(s["shape"], dtype=np.int64)) for s in specs) * _FLOAT.itemsize
    if len(payload) != expected:
        raise CheckpointError(f"checkpoint holds {len(payload)} bytes, array table needs {expected}")

    arrays: Dict[str, np.ndarray] = {}
    for spec in specs:
        shape = tuple(int(d) for d in spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        flat = np.frombuffer(payload, dtype=_FLOAT, count=count, offset=offset)
        arrays[spec["name"]] = flat.astype(np.float64).reshape(shape)
        offset += count * _FLOAT.itemsize
    return metadata, arrays


def write(path: Path, magic: bytes, metadata: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(magic, metadata, arrays))


def read(path: Path, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(magic, path.read_bytes())
