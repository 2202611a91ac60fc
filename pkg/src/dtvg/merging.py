"""Merging of rescaled task prompt vectors into a mixed prompt.

Forward: P_mix = P_init + scale_cols(T_t, alpha_t) + sum_s scale_cols(T_s, alpha_s),
sources summed in their stored (admission) order. Backward propagates a
gradient with respect to P_mix onto the stage-2 learnables: the target TPV,
the target scaling term, and the scaling terms of the selected sources.
Source TPVs are frozen; unselected sources receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .tpv import ScalingTerm, SoftPrompt, TaskPromptVector, prompt_fingerprint


@dataclass(frozen=True)
class MergeInputs:
    p_init: SoftPrompt
    target_tpv: TaskPromptVector
    target_alpha: ScalingTerm
    sources: tuple[tuple[TaskPromptVector, ScalingTerm], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sources", tuple(self.sources))
        d, r = self.p_init.d, self.p_init.r
        fp = prompt_fingerprint(self.p_init)
        seen_ids = set()
        for t, a in ((self.target_tpv, self.target_alpha),) + self.sources:
            if (t.d, t.r) != (d, r):
                raise ValueError(f"TPV {t.task_id!r} shape ({t.d}, {t.r}) != ({d}, {r})")
            if t.init_fingerprint != fp:
                raise ValueError(f"TPV {t.task_id!r} has a different initialization")
            if a.task_id != t.task_id:
                raise ValueError(f"scaling term {a.task_id!r} paired with TPV {t.task_id!r}")
            if a.alpha.shape[0] != r:
                raise ValueError(f"alpha length {a.alpha.shape[0]} != r={r}")
        for t, _ in self.sources:
            if t.task_id in seen_ids:
                raise ValueError(f"duplicate source {t.task_id!r}")
            seen_ids.add(t.task_id)


@dataclass(frozen=True)
class MergeGrads:
    d_target_tpv: np.ndarray
    d_target_alpha: np.ndarray
    d_source_alphas: dict[str, np.ndarray]


def merge(inputs: MergeInputs) -> SoftPrompt:
    acc = inputs.p_init.weights + numkit.mat_scale_cols(
        inputs.target_tpv.delta, inputs.target_alpha.alpha
    )
    for t, a in inputs.sources:
        acc = acc + numkit.mat_scale_cols(t.delta, a.alpha)
    return SoftPrompt(inputs.p_init.d, inputs.p_init.r, acc)


def _alpha_grad(delta: np.ndarray, d_pmix: np.ndarray) -> np.ndarray:
    r = delta.shape[1]
    out = np.empty(r, dtype=np.float64)
    for j in range(r):
        out[j] = numkit.dot(delta[:, j], d_pmix[:, j])
    return out


def merge_backward(inputs: MergeInputs, d_pmix: np.ndarray) -> MergeGrads:
    d, r = inputs.p_init.d, inputs.p_init.r
    if d_pmix.shape != (d, r):
        raise ValueError(f"gradient shape {d_pmix.shape} != ({d}, {r})")
    if not np.all(np.isfinite(d_pmix)):
        raise ValueError("non-finite merge gradient")
    d_target_tpv = numkit.mat_scale_cols(d_pmix, inputs.target_alpha.alpha)
    d_target_alpha = _alpha_grad(inputs.target_tpv.delta, d_pmix)
    d_source_alphas = {t.task_id: _alpha_grad(t.delta, d_pmix) for t, _ in inputs.sources}
    return MergeGrads(d_target_tpv, d_target_alpha, d_source_alphas)
