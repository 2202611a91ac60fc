"""Standalone TPVF serialization against the engine's normative byte layout.

Little-endian: magic "TPV1", version u32 (=1), kind u8 (0 = soft prompt,
1 = task prompt vector), d u32, r u32, init fingerprint u64 (zero for kind 0),
task id as u16 length + UTF-8 bytes, then the payload of r*d float32 values
in token-major order (token 0's d values first). The initialization
fingerprint is FNV-1a-64 over the token-major float32 payload encoding of the
initialization prompt, so it can be computed from a serialized p_init file
without any engine code.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"TPV1"
VERSION = 1
KIND_PROMPT = 0
KIND_TPV = 1

_HEADER = struct.Struct("<4sIBIIQH")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class TpvfImage:
    """Parsed header and weights of one TPVF file; weights are d x r float64."""

    kind: int
    d: int
    r: int
    init_fingerprint: int
    task_id: str
    weights: np.ndarray


def payload_bytes(weights: np.ndarray) -> bytes:
    """Token-major float32 encoding of a d x r weight matrix."""
    return np.ascontiguousarray(weights.astype("<f4").T).tobytes()


def serialize(image: TpvfImage) -> bytes:
    tid = image.task_id.encode("utf-8")
    header = _HEADER.pack(
        MAGIC, VERSION, image.kind, image.d, image.r, image.init_fingerprint, len(tid)
    )
    return header + tid + payload_bytes(image.weights)


def write(path: Union[str, Path], image: TpvfImage) -> bytes:
    """Atomically write the file; returns the serialized bytes."""
    path = Path(path)
    data = serialize(image)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return data


def parse(data: bytes, source: str = "<bytes>") -> TpvfImage:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ValueError(f"{source}: not a TPVF file")
    if len(data) < _HEADER.size:
        raise ValueError(f"{source}: truncated header")
    _, version, kind, d, r, fingerprint, tid_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise ValueError(f"{source}: unsupported TPVF version {version}")
    offset = _HEADER.size
    task_id = data[offset : offset + tid_len].decode("utf-8")
    offset += tid_len
    expected = 4 * r * d
    if len(data) - offset != expected:
        raise ValueError(f"{source}: payload length mismatch")
    flat = np.frombuffer(data, dtype="<f4", count=r * d, offset=offset)
    return TpvfImage(kind, d, r, fingerprint, task_id, flat.reshape(r, d).T.astype(np.float64))


def read(path: Union[str, Path]) -> TpvfImage:
    path = Path(path)
    return parse(path.read_bytes(), source=str(path))


def fingerprint_of_prompt_file(path: Union[str, Path]) -> int:
    """Initialization fingerprint: FNV-1a-64 over the file's payload bytes."""
    image = read(path)
    return fnv1a64(payload_bytes(image.weights))
