"""Export a trained soft-prompt tensor from a checkpoint as a TPVF file.

The engine stores prompts as d x r (embedding dimension by prompt length).
Frameworks usually store them as (tokens x dim), so that orientation is the
default and gets transposed; pass an explicit orientation to override, and
note that square tensors always require one. With an initialization prompt
file the exporter writes a kind-1 task prompt vector (checkpoint prompt
minus initialization, fingerprinted against the initialization); otherwise
it writes the raw kind-0 prompt. No numerical transformation happens beyond
layout normalization and float32 storage.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tpvf
from .checkpoints import resolve_tensor

ORIENTATIONS = ("tokens_by_dim", "dim_by_tokens")


class AmbiguousOrientation(ValueError):
    pass


@dataclass(frozen=True)
class ExportSpec:
    checkpoint: str  # local path or hub repo id
    tensor_name: str  # parameter name/path inside the checkpoint
    task_id: str
    output: str
    p_init: str | None = None  # TPVF file; produces a TPV instead of a prompt
    orientation: str | None = None  # None = assume tokens x dim unless square

    def __post_init__(self) -> None:
        if self.orientation is not None and self.orientation not in ORIENTATIONS:
            raise ValueError(
                f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}"
            )


@dataclass(frozen=True)
class ExportResult:
    path: Path
    kind: int
    d: int
    r: int
    task_id: str
    sha256: str


def _normalize_orientation(tensor: np.ndarray, orientation: str | None) -> np.ndarray:
    """Return the tensor as d x r per the documented convention."""
    if tensor.ndim != 2:
        raise ValueError(f"prompt tensor must be 2-D, got shape {tensor.shape}")
    rows, cols = tensor.shape
    if orientation is None:
        if rows == cols:
            raise AmbiguousOrientation(
                f"tensor is square ({rows}x{cols}); pass an explicit orientation "
                f"('tokens_by_dim' or 'dim_by_tokens')"
            )
        orientation = "tokens_by_dim"
    if orientation == "tokens_by_dim":
        return tensor.T  # (r, d) -> (d, r)
    return tensor


def export(spec: ExportSpec) -> ExportResult:
    tensor = resolve_tensor(spec.checkpoint, spec.tensor_name)
    weights = np.asarray(_normalize_orientation(tensor, spec.orientation), dtype=np.float64)
    d, r = weights.shape

    if spec.p_init is None:
        image = tpvf.TpvfImage(tpvf.KIND_PROMPT, d, r, 0, spec.task_id, weights)
    else:
        init = tpvf.read(spec.p_init)
        if init.kind != tpvf.KIND_PROMPT:
            raise ValueError(f"{spec.p_init}: initialization file must be kind 0")
        if (init.d, init.r) != (d, r):
            raise ValueError(
                f"initialization shape ({init.d}, {init.r}) does not match "
                f"checkpoint prompt ({d}, {r})"
            )
        delta = weights - init.weights
        fingerprint = tpvf.fingerprint_of_prompt_file(spec.p_init)
        image = tpvf.TpvfImage(tpvf.KIND_TPV, d, r, fingerprint, spec.task_id, delta)

    data = tpvf.write(spec.output, image)
    return ExportResult(
        path=Path(spec.output),
        kind=image.kind,
        d=d,
        r=r,
        task_id=spec.task_id,
        sha256=hashlib.sha256(data).hexdigest(),
    )
