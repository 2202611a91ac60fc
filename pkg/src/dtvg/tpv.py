"""Task prompt vectors and task-similarity metrics.

A task prompt vector (TPV) is the displacement `p_star - p_init` left in
prompt-weight space by tuning one task. Two TPVs are comparable only when
they were produced against the same initialization, which is enforced via a
64-bit fingerprint of the initialization prompt.

Two similarity metrics live here: the TPV dot-product metric (mean-pooled
token vectors, then an inner product scaled so it equals the full double sum
over token pairs divided by r^2) and the cosine-of-pooled-prompts baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .numkit import fnv1a64


def _frozen_f64(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SoftPrompt:
    """A d x r matrix of prompt token vectors; column j is token j."""

    d: int
    r: int
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = _frozen_f64(self.weights)
        if w.shape != (self.d, self.r):
            raise ValueError(f"weights shape {w.shape} does not match ({self.d}, {self.r})")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite prompt weights")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class TaskPromptVector:
    """p_star - p_init for one task, tagged with the initialization it used."""

    task_id: str
    d: int
    r: int
    delta: np.ndarray
    init_fingerprint: int

    def __post_init__(self) -> None:
        delta = _frozen_f64(self.delta)
        if delta.shape != (self.d, self.r):
            raise ValueError(f"delta shape {delta.shape} does not match ({self.d}, {self.r})")
        if not np.all(np.isfinite(delta)):
            raise ValueError("non-finite TPV delta")
        object.__setattr__(self, "delta", delta)


@dataclass(frozen=True)
class ScalingTerm:
    """Per-token scaling vector alpha of length r for one task's TPV."""

    task_id: str
    alpha: np.ndarray

    def __post_init__(self) -> None:
        a = _frozen_f64(self.alpha)
        if a.ndim != 1:
            raise ValueError("alpha must be a vector")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite scaling term")
        object.__setattr__(self, "alpha", a)

    @staticmethod
    def ones(task_id: str, r: int) -> "ScalingTerm":
        return ScalingTerm(task_id, np.ones(r, dtype=np.float64))


def prompt_fingerprint(p: SoftPrompt) -> int:
    """FNV-1a-64 over the token-major little-endian float32 encoding.

    This is byte-for-byte the TPVF payload encoding of the prompt, so the
    fingerprint can be recomputed from a serialized initialization file.
    """
    return fnv1a64(p.weights.astype("<f4").T.tobytes())


def compute_tpv(p_star: SoftPrompt, p_init: SoftPrompt, task_id: str) -> TaskPromptVector:
    if (p_star.d, p_star.r) != (p_init.d, p_init.r):
        raise ValueError(
            f"shape mismatch: p_star ({p_star.d}, {p_star.r}) vs p_init ({p_init.d}, {p_init.r})"
        )
    delta = numkit.mat_sub(p_star.weights, p_init.weights)
    return TaskPromptVector(task_id, p_init.d, p_init.r, delta, prompt_fingerprint(p_init))


def rescale(t: TaskPromptVector, a: ScalingTerm) -> TaskPromptVector:
    if a.task_id != t.task_id:
        raise ValueError(f"scaling term for {a.task_id!r} applied to TPV {t.task_id!r}")
    if a.alpha.shape[0] != t.r:
        raise ValueError(f"alpha length {a.alpha.shape[0]} does not match r={t.r}")
    return TaskPromptVector(
        t.task_id, t.d, t.r, numkit.mat_scale_cols(t.delta, a.alpha), t.init_fingerprint
    )


def _check_comparable(t1: TaskPromptVector, t2: TaskPromptVector) -> None:
    if (t1.d, t1.r) != (t2.d, t2.r):
        raise ValueError(f"incomparable shapes: ({t1.d}, {t1.r}) vs ({t2.d}, {t2.r})")
    if t1.init_fingerprint != t2.init_fingerprint:
        raise ValueError("incomparable initializations")


def sim(t1: TaskPromptVector, t2: TaskPromptVector) -> float:
    """Task similarity: inner product of mean-pooled token vectors.

    Equals (1/r^2) * (sum_i v1_i)^T (sum_j v2_j); symmetric and bilinear.
    """
    _check_comparable(t1, t2)
    return numkit.dot(numkit.mat_col_mean(t1.delta), numkit.mat_col_mean(t2.delta))


def cosine_prompt_sim(p1: SoftPrompt, p2: SoftPrompt) -> float:
    """Cosine of mean-pooled prompt token vectors (the retrieval baseline)."""
    if (p1.d, p1.r) != (p2.d, p2.r):
        raise ValueError(f"incomparable shapes: ({p1.d}, {p1.r}) vs ({p2.d}, {p2.r})")
    m1 = numkit.mat_col_mean(p1.weights)
    m2 = numkit.mat_col_mean(p2.weights)
    n1 = numkit.dot(m1, m1) ** 0.5
    n2 = numkit.dot(m2, m2) ** 0.5
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("degenerate prompt")
    value = numkit.dot(m1, m2) / (n1 * n2)
    return min(1.0, max(-1.0, value))
