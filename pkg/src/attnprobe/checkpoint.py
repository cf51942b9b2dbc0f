"""Binary tensor-archive container used for probe and toy-model weights.

Layout (little-endian):

    bytes 0..3    magic ``ATPW``
    byte  4       version (1)
    bytes 5..7    reserved (zero)
    bytes 8..39   sha256 of the canonical config JSON (the fingerprint)
    bytes 40..43  u32 config JSON length
    bytes 44..47  u32 tensor count
    then the config JSON (UTF-8), then per tensor:
    u16 name length, name (UTF-8), u8 ndim, u32 dims..., float32 payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncationError

MAGIC = b"ATPW"
VERSION = 1
_HEAD = struct.Struct("<4sB3x32sII")


def config_fingerprint(config: dict) -> bytes:
    return hashlib.sha256(_canonical(config)).digest()


def _canonical(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_tensors(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = _canonical(config)
    parts = [_HEAD.pack(MAGIC, VERSION, hashlib.sha256(blob).digest(), len(blob), len(tensors)), blob]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, fingerprint, config_len, n_tensors = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEAD.size
    blob = raw[pos : pos + config_len]
    if len(blob) != config_len:
        raise TruncationError(f"{path}: truncated config block")
    if hashlib.sha256(blob).digest() != fingerprint:
        raise FormatError(f"{path}: config fingerprint mismatch (corrupt file)")
    config = json.loads(blob.decode("utf-8"))
    pos += config_len
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
        except (struct.error, ValueError) as exc:
            raise TruncationError(f"{path}: truncated tensor table ({exc})") from exc
        if arr.size != count:
            raise TruncationError(f"{path}: tensor {name!r} payload truncated")
        tensors[name] = arr.reshape(shape).copy()
    if pos != len(raw):
        raise TruncationError(f"{path}: {len(raw) - pos} trailing bytes")
    return config, tensors
