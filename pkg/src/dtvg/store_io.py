"""Bit-exact persistence: TPVF vector files, run manifests, JSONL metrics.

TPVF byte layout (little-endian, normative):

    offset  size  field
    0       4     magic "TPV1"
    4       4     version, u32 (currently 1)
    8       1     kind, u8: 0 = soft prompt, 1 = task prompt vector
    9       4     d, u32 (embedding dimension)
    13      4     r, u32 (prompt length in tokens)
    17      8     init_fingerprint, u64 (zero for kind 0)
    25      2     task_id byte length, u16
    27      n     task_id, UTF-8
    27+n    4*r*d payload, float32, token-major (token 0's d values first)

The engine computes in float64 and stores float32 (round-to-nearest-even on
write, lossless widening on read). Writes go to a temp file in the target
directory and are renamed into place, so a crash never leaves a partial file
at the final path.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Union

import numpy as np

from .tpv import SoftPrompt, TaskPromptVector

MAGIC = b"TPV1"
VERSION = 1
KIND_PROMPT = 0
KIND_TPV = 1

_HEADER = struct.Struct("<4sIBIIQH")

METRICS_SCHEMA_VERSION = 1
METRICS_REQUIRED_KEYS = (
    "schema",
    "step",
    "mode",
    "selected",
    "ts",
    "kc",
    "greedy_objective",
    "exact_objective",
    "train_loss",
    "val_accuracy",
)


class TpvfFormatError(ValueError):
    """Base for malformed TPVF files."""


class TpvfMagicError(TpvfFormatError):
    """Not a TPVF file."""


class TpvfVersionError(TpvfFormatError):
    """Unsupported TPVF version."""


class TpvfTruncatedError(TpvfFormatError):
    """File ends before the declared payload."""


class TpvfLengthError(TpvfFormatError):
    """Payload length disagrees with the header."""


@dataclass(frozen=True)
class TpvfRecord:
    """In-memory image of one TPVF file."""

    kind: int
    d: int
    r: int
    init_fingerprint: int
    task_id: str
    weights: np.ndarray  # (d, r) float64

    def __post_init__(self) -> None:
        if self.kind not in (KIND_PROMPT, KIND_TPV):
            raise TpvfFormatError(f"invalid kind {self.kind}")
        if self.kind == KIND_PROMPT and self.init_fingerprint != 0:
            raise TpvfFormatError("kind-0 records must carry a zero fingerprint")
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.d, self.r):
            raise TpvfFormatError(f"weights shape {w.shape} != ({self.d}, {self.r})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def to_soft_prompt(self) -> SoftPrompt:
        if self.kind != KIND_PROMPT:
            raise TpvfFormatError("record is not a soft prompt")
        return SoftPrompt(self.d, self.r, self.weights)

    def to_task_prompt_vector(self) -> TaskPromptVector:
        if self.kind != KIND_TPV:
            raise TpvfFormatError("record is not a task prompt vector")
        return TaskPromptVector(self.task_id, self.d, self.r, self.weights, self.init_fingerprint)


def record_from(obj: Union[TpvfRecord, SoftPrompt, TaskPromptVector], task_id: str | None = None) -> TpvfRecord:
    if isinstance(obj, TpvfRecord):
        if task_id is not None and task_id != obj.task_id:
            raise ValueError(f"conflicting task_id {task_id!r} vs {obj.task_id!r}")
        return obj
    if isinstance(obj, SoftPrompt):
        return TpvfRecord(KIND_PROMPT, obj.d, obj.r, 0, task_id or "", obj.weights)
    if isinstance(obj, TaskPromptVector):
        if task_id is not None and task_id != obj.task_id:
            raise ValueError(f"conflicting task_id {task_id!r} vs {obj.task_id!r}")
        return TpvfRecord(KIND_TPV, obj.d, obj.r, obj.init_fingerprint, obj.task_id, obj.delta)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def serialize_tpvf(obj: Union[TpvfRecord, SoftPrompt, TaskPromptVector], task_id: str | None = None) -> bytes:
    rec = record_from(obj, task_id)
    tid = rec.task_id.encode("utf-8")
    if len(tid) > 0xFFFF:
        raise ValueError("task_id too long")
    header = _HEADER.pack(MAGIC, VERSION, rec.kind, rec.d, rec.r, rec.init_fingerprint, len(tid))
    payload = rec.weights.astype("<f4").T.tobytes()  # token-major
    return header + tid + payload


def write_tpvf(
    path: Union[str, Path],
    obj: Union[TpvfRecord, SoftPrompt, TaskPromptVector],
    task_id: str | None = None,
) -> None:
    path = Path(path)
    data = serialize_tpvf(obj, task_id)
    tmp_fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(tmp_fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp_name, path)
    except OSError as exc:
        raise OSError(f"writing {path}: {exc}") from exc
    finally:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)


def parse_tpvf(data: bytes, source: str = "<bytes>") -> TpvfRecord:
    if len(data) < 4 or data[:4] != MAGIC:
        raise TpvfMagicError(f"{source}: not a TPVF file")
    if len(data) < _HEADER.size:
        raise TpvfTruncatedError(f"{source}: truncated header")
    _, version, kind, d, r, fingerprint, tid_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise TpvfVersionError(f"{source}: unsupported version {version}")
    offset = _HEADER.size
    if len(data) < offset + tid_len:
        raise TpvfTruncatedError(f"{source}: truncated task id")
    task_id = data[offset : offset + tid_len].decode("utf-8")
    offset += tid_len
    expected = 4 * r * d
    actual = len(data) - offset
    if actual < expected:
        raise TpvfTruncatedError(f"{source}: truncated payload ({actual} of {expected} bytes)")
    if actual > expected:
        raise TpvfLengthError(f"{source}: payload length mismatch ({actual} vs {expected} bytes)")
    flat = np.frombuffer(data, dtype="<f4", count=r * d, offset=offset)
    weights = flat.reshape(r, d).T.astype(np.float64)
    try:
        return TpvfRecord(kind, d, r, fingerprint, task_id, weights)
    except TpvfFormatError as exc:
        raise type(exc)(f"{source}: {exc}") from exc


def read_tpvf(path: Union[str, Path]) -> TpvfRecord:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"reading {path}: {exc}") from exc
    return parse_tpvf(data, source=str(path))


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_content_hash(paths: Iterable[Union[str, Path]], root: Union[str, Path]) -> str:
    """Combined content hash over files, keyed by path relative to `root`."""
    root = Path(root)
    h = hashlib.sha256()
    entries = sorted(Path(p) for p in paths)
    for p in entries:
        h.update(str(p.relative_to(root)).encode("utf-8"))
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to re-launch an identical run."""

    engine_version: str
    command: str
    config: dict[str, Any]
    seed: int
    input_fingerprints: dict[str, str] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    output_hash: str = ""

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: Union[str, Path]) -> "RunManifest":
        return RunManifest(**json.loads(Path(path).read_text()))


def make_metrics_record(
    step: int,
    mode: str,
    selected: Iterable[str],
    ts: float,
    kc: float,
    greedy_objective: float | None,
    exact_objective: float | None,
    train_loss: float | None,
    val_accuracy: float | None,
    **extra: Any,
) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "schema": METRICS_SCHEMA_VERSION,
        "step": step,
        "mode": mode,
        "selected": list(selected),
        "ts": ts,
        "kc": kc,
        "greedy_objective": greedy_objective,
        "exact_objective": exact_objective,
        "train_loss": train_loss,
        "val_accuracy": val_accuracy,
    }
    rec.update(extra)
    return rec


def validate_metrics_record(rec: dict[str, Any]) -> None:
    missing = [k for k in METRICS_REQUIRED_KEYS if k not in rec]
    if missing:
        raise ValueError(f"metrics record missing keys: {missing}")
    if rec["schema"] != METRICS_SCHEMA_VERSION:
        raise ValueError(f"unsupported metrics schema {rec['schema']}")


class MetricsWriter:
    """Append-only JSONL stream of metrics records."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._fh: IO[str] = open(self.path, "a", encoding="utf-8")

    def write(self, rec: dict[str, Any]) -> None:
        validate_metrics_record(rec)
        self._fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def read_metrics(path: Union[str, Path]) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            validate_metrics_record(rec)
            records.append(rec)
    return records
