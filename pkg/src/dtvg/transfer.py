"""Stage 2: the dynamic grouping transfer loop and its comparison modes.

Each step (in the dynamic mode) regroups the sources from similarities of the
currently rescaled task prompt vectors, merges the selected group into a
mixed prompt, takes a gradient step on the target batch, and pushes the
gradient through the merge onto the learnables: the target TPV, its scaling
term, and the scaling terms of the selected sources. Two-speed learning
rates apply (one for the target TPV + its alpha, one for source alphas).

Modes:
  dtvg_dynamic       regroup every `regroup_every` steps (default every step)
  fix_group          group once at step 0, never again
  only_target        no sources ever; learns the target TPV and alpha only
  all_for_one        all sources, fixed, alphas learnable
  one_for_one_tpv    SPoT-style: tune target once, retrieve the most similar
                     source by TPV similarity, restart tuning from its prompt
  one_for_one_cosine same, retrieval by cosine of pooled prompts
  no_transfer_pt     plain stage-1 prompt tuning (no transfer at all)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import numkit
from .grouping import (
    GroupingResult,
    SimTable,
    exact_group,
    greedy_group,
    knowledge_consistency,
    rank_by_target_similarity,
    target_similarity,
)
from .merging import MergeGrads, MergeInputs, merge, merge_backward
from .numkit import Rng, derive_seed
from .store_io import MetricsWriter, make_metrics_record
from .testbed import (
    PromptTuneConfig,
    SyntheticTask,
    ToyModel,
    evaluate_accuracy,
    loss_and_grad_prompt,
    prompt_tune_trace,
    subsample_few_shot,
)
from .tpv import (
    ScalingTerm,
    SoftPrompt,
    TaskPromptVector,
    compute_tpv,
    cosine_prompt_sim,
    prompt_fingerprint,
    rescale,
    sim,
)

MODES = (
    "dtvg_dynamic",
    "fix_group",
    "only_target",
    "all_for_one",
    "one_for_one_tpv",
    "one_for_one_cosine",
    "no_transfer_pt",
)

EXACT_LOG_MAX_SOURCES = 12


@dataclass(frozen=True)
class TransferConfig:
    n_max: int = 400
    lr_target: float = 2.0
    lr_source_alpha: float = 6.0  # two-speed; chosen from the searched grid
    batch_size: int = 16
    seed: int = 0
    mode: str = "dtvg_dynamic"
    regroup_every: int = 1
    eval_every: int = 10
    few_shot_k: int | None = None
    target_warm_start: bool = True
    retain_inactive_alphas: bool = True  # a dropped source keeps its learned alpha
    strict_sim: bool = False
    greedy_early_stop: bool = False
    log_exact: bool = True
    exact_lambda: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_max < 0 or self.lr_target <= 0 or self.lr_source_alpha <= 0:
            raise ValueError("n_max must be >= 0 and learning rates positive")
        if self.batch_size <= 0 or self.regroup_every < 1 or self.eval_every < 1:
            raise ValueError("batch_size, regroup_every, eval_every must be positive")
        if self.few_shot_k is not None and self.few_shot_k < 1:
            raise ValueError("few_shot_k must be positive when given")


@dataclass
class HistoryEntry:
    step: int
    selected: tuple[str, ...]
    ts: float
    kc: float
    train_loss: float | None
    val_accuracy: float | None


@dataclass
class TransferState:
    step: int
    target_tpv: np.ndarray
    target_alpha: np.ndarray
    source_alphas: dict[str, np.ndarray]
    current_group: GroupingResult | None
    history: list[HistoryEntry] = field(default_factory=list)


def build_sim_table(
    source_tpvs: Sequence[TaskPromptVector],
    source_alphas: dict[str, np.ndarray],
    target_tpv: TaskPromptVector,
    target_alpha: np.ndarray,
) -> SimTable:
    """Similarities of the rescaled TPVs: each task's alpha is applied first."""
    rescaled = [
        rescale(t, ScalingTerm(t.task_id, source_alphas[t.task_id])) for t in source_tpvs
    ]
    target_rescaled = rescale(target_tpv, ScalingTerm(target_tpv.task_id, target_alpha))
    n = len(rescaled)
    s2t = np.array([sim(t, target_rescaled) for t in rescaled], dtype=np.float64)
    s2s = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        s2s[i, i] = sim(rescaled[i], rescaled[i])
        for j in range(i + 1, n):
            value = sim(rescaled[i], rescaled[j])
            s2s[i, j] = value
            s2s[j, i] = value
    return SimTable(tuple(t.task_id for t in source_tpvs), s2t, s2s)


def regroup(
    state: TransferState,
    source_tpvs: Sequence[TaskPromptVector],
    target_tpv: TaskPromptVector,
    cfg: TransferConfig,
) -> tuple[GroupingResult, SimTable]:
    """Recompute the greedy grouping from the current rescaled TPVs."""
    table = build_sim_table(source_tpvs, state.source_alphas, target_tpv, state.target_alpha)
    result = greedy_group(table, early_stop=cfg.greedy_early_stop, strict_sim=cfg.strict_sim)
    state.current_group = result
    return result, table


def _fixed_group(table: SimTable, selected_idx: Sequence[int]) -> GroupingResult:
    idx = list(selected_idx)
    ts = target_similarity(table, idx) if idx else 0.0
    kc = knowledge_consistency(table, idx)
    return GroupingResult(
        selected=tuple(table.source_ids[i] for i in idx),
        rank_list=tuple(table.source_ids[i] for i in rank_by_target_similarity(table)),
        ts=ts,
        kc=kc,
        objective=ts + kc,
        decisions=(),
    )


@dataclass
class TransferRun:
    mode: str
    final_pmix: SoftPrompt
    state: TransferState
    losses: list[float]
    evals: list[tuple[int, float]]
    best_step: int
    best_val_accuracy: float
    test_accuracy: float
    metrics: list[dict[str, Any]]


def _tune_config(cfg: TransferConfig, seed: int) -> PromptTuneConfig:
    return PromptTuneConfig(
        lr=cfg.lr_target,
        steps=cfg.n_max,
        batch_size=cfg.batch_size,
        seed=seed,
        eval_every=cfg.eval_every,
    )


def _emit(writer: MetricsWriter | None, records: list[dict[str, Any]], rec: dict[str, Any]) -> None:
    records.append(rec)
    if writer is not None:
        writer.write(rec)


def _final_record(cfg: TransferConfig, mode: str, selected: list[str],
                  best_step: int, best_val: float, test_acc: float) -> dict[str, Any]:
    """Closing record so a metrics stream alone determines the run outcome."""
    return make_metrics_record(
        step=cfg.n_max, mode=mode, selected=selected,
        ts=0.0, kc=0.0, greedy_objective=None, exact_objective=None,
        train_loss=None, val_accuracy=best_val,
        event="final", test_accuracy=test_acc, best_step=best_step,
    )


def _run_plain_tuning(
    model: ToyModel,
    task: SyntheticTask,
    p_init: SoftPrompt,
    cfg: TransferConfig,
    mode: str,
    selected: list[str],
    retrieval_score: float | None,
    metrics_writer: MetricsWriter | None,
    start_prompt: SoftPrompt,
) -> TransferRun:
    trace = prompt_tune_trace(model, task, _tune_config(cfg, cfg.seed), start_prompt)
    records: list[dict[str, Any]] = []
    eval_at = dict(trace.evals)
    for step, loss in enumerate(trace.losses):
        _emit(
            metrics_writer,
            records,
            make_metrics_record(
                step=step,
                mode=mode,
                selected=selected,
                ts=retrieval_score if retrieval_score is not None else 0.0,
                kc=0.0,
                greedy_objective=None,
                exact_objective=None,
                train_loss=loss,
                val_accuracy=eval_at.get(step + 1),
            ),
        )
    test_acc = evaluate_accuracy(model, trace.prompt, task.test_x, task.test_y)
    _emit(metrics_writer, records,
          _final_record(cfg, mode, selected, trace.best_step, trace.best_val_accuracy, test_acc))
    state = TransferState(
        step=cfg.n_max,
        target_tpv=numkit.mat_sub(trace.final_prompt.weights, p_init.weights),
        target_alpha=np.ones(p_init.r, dtype=np.float64),
        source_alphas={},
        current_group=None,
    )
    return TransferRun(
        mode=mode,
        final_pmix=trace.final_prompt,
        state=state,
        losses=trace.losses,
        evals=trace.evals,
        best_step=trace.best_step,
        best_val_accuracy=trace.best_val_accuracy,
        test_accuracy=test_acc,
        metrics=records,
    )


def _fit_target_stage1(
    model: ToyModel,
    task: SyntheticTask,
    p_init: SoftPrompt,
    cfg: TransferConfig,
) -> TaskPromptVector:
    """Stage-1 tune of the target on its own (possibly few-shot) train split.

    Uses the same step budget as stage 2, mirroring the few-shot protocol of
    running both stages with one budget.
    """
    fit = prompt_tune_trace(
        model, task, _tune_config(cfg, derive_seed(cfg.seed, "target-fit")), p_init
    )
    return compute_tpv(fit.prompt, p_init, task.task_id)


def _retrieve_source(
    task: SyntheticTask,
    source_tpvs: Sequence[TaskPromptVector],
    p_init: SoftPrompt,
    target_tpv: TaskPromptVector,
    mode: str,
) -> tuple[int, float, list[float]]:
    """SPoT protocol: rank sources against the stage-1 target fit."""
    target_prompt = SoftPrompt(p_init.d, p_init.r, p_init.weights + target_tpv.delta)
    scores = []
    for t in source_tpvs:
        if mode == "one_for_one_tpv":
            scores.append(sim(t, target_tpv))
        else:
            source_prompt = SoftPrompt(p_init.d, p_init.r, p_init.weights + t.delta)
            scores.append(cosine_prompt_sim(source_prompt, target_prompt))
    best = numkit.argmax_with_lowest_index_tiebreak(np.array(scores))
    return best, scores[best], scores


def run_transfer(
    model: ToyModel,
    target_task: SyntheticTask,
    source_tpvs: Sequence[TaskPromptVector],
    p_init: SoftPrompt,
    cfg: TransferConfig,
    metrics_writer: MetricsWriter | None = None,
    target_tpv_init: TaskPromptVector | None = None,
) -> TransferRun:
    """Execute stage 2 in the configured mode and track the best checkpoint.

    With `target_warm_start` (the default) the target TPV starts from a
    stage-1 fit of the target on its own train split, so step-0 similarities
    are informative; pass `target_tpv_init` to reuse an existing stage-1
    artifact instead of refitting. With the flag off the target TPV starts
    at zero and the step-0 similarities are degenerately tied at zero.
    """
    fp = prompt_fingerprint(p_init)
    for t in source_tpvs:
        if t.init_fingerprint != fp:
            raise ValueError(f"source {t.task_id!r} was tuned from a different initialization")
    if target_tpv_init is not None and target_tpv_init.init_fingerprint != fp:
        raise ValueError("target warm start was tuned from a different initialization")

    task = target_task
    if cfg.few_shot_k is not None:
        task = subsample_few_shot(task, cfg.few_shot_k, cfg.seed)

    if cfg.mode == "no_transfer_pt":
        return _run_plain_tuning(
            model, task, p_init, cfg, cfg.mode, [], None, metrics_writer, p_init
        )

    if cfg.mode in ("one_for_one_tpv", "one_for_one_cosine"):
        fit_tpv = target_tpv_init
        if fit_tpv is None:
            fit_tpv = _fit_target_stage1(model, task, p_init, cfg)
        best_idx, best_score, _ = _retrieve_source(task, source_tpvs, p_init, fit_tpv, cfg.mode)
        chosen = source_tpvs[best_idx]
        start = SoftPrompt(p_init.d, p_init.r, p_init.weights + chosen.delta)
        return _run_plain_tuning(
            model, task, p_init, cfg, cfg.mode, [chosen.task_id], best_score,
            metrics_writer, start,
        )

    return _run_grouped_modes(model, task, source_tpvs, p_init, cfg, metrics_writer, target_tpv_init)


def _run_grouped_modes(
    model: ToyModel,
    task: SyntheticTask,
    source_tpvs: Sequence[TaskPromptVector],
    p_init: SoftPrompt,
    cfg: TransferConfig,
    metrics_writer: MetricsWriter | None,
    target_tpv_init: TaskPromptVector | None,
) -> TransferRun:
    fp = prompt_fingerprint(p_init)
    d, r = p_init.d, p_init.r
    rng = Rng(cfg.seed)
    by_id = {t.task_id: t for t in source_tpvs}

    if cfg.target_warm_start:
        if target_tpv_init is None:
            target_tpv_init = _fit_target_stage1(model, task, p_init, cfg)
        initial_delta = target_tpv_init.delta.copy()
    else:
        initial_delta = np.zeros((d, r), dtype=np.float64)

    state = TransferState(
        step=0,
        target_tpv=initial_delta,
        target_alpha=np.ones(r, dtype=np.float64),
        source_alphas={t.task_id: np.ones(r, dtype=np.float64) for t in source_tpvs},
        current_group=None,
    )

    def target_as_tpv() -> TaskPromptVector:
        return TaskPromptVector(task.task_id, d, r, state.target_tpv, fp)

    def ensure_group(step: int) -> tuple[GroupingResult, float | None, bool]:
        """Returns (group, exact objective if logged, whether a regroup ran)."""
        if cfg.mode == "dtvg_dynamic":
            due = state.current_group is None or step % cfg.regroup_every == 0
        else:
            due = state.current_group is None
        if not due:
            return state.current_group, None, False
        table = build_sim_table(source_tpvs, state.source_alphas, target_as_tpv(), state.target_alpha)
        if cfg.mode == "only_target":
            group = _fixed_group(table, [])
        elif cfg.mode == "all_for_one":
            group = _fixed_group(table, list(range(table.n)))
        else:
            group = greedy_group(table, early_stop=cfg.greedy_early_stop, strict_sim=cfg.strict_sim)
        state.current_group = group
        if not cfg.retain_inactive_alphas:
            # reset policy: a source that is out of the group re-enters fresh
            for sid in state.source_alphas:
                if sid not in group.selected:
                    state.source_alphas[sid] = np.ones(r, dtype=np.float64)
        exact_obj = None
        if cfg.log_exact and table.n <= EXACT_LOG_MAX_SOURCES:
            exact_obj = exact_group(table, cfg.exact_lambda).objective
        return group, exact_obj, True

    def merge_inputs(group: GroupingResult) -> MergeInputs:
        sources = tuple(
            (by_id[sid], ScalingTerm(sid, state.source_alphas[sid])) for sid in group.selected
        )
        return MergeInputs(
            p_init=p_init,
            target_tpv=target_as_tpv(),
            target_alpha=ScalingTerm(task.task_id, state.target_alpha),
            sources=sources,
        )

    losses: list[float] = []
    records: list[dict[str, Any]] = []
    evals: list[tuple[int, float]] = []

    group, exact_obj, _ = ensure_group(0)
    p_mix = merge(merge_inputs(group))
    best_acc = evaluate_accuracy(model, p_mix, task.val_x, task.val_y)
    best_step = 0
    best_snapshot = (
        state.target_tpv.copy(),
        state.target_alpha.copy(),
        {k: v.copy() for k, v in state.source_alphas.items()},
        group,
    )
    evals.append((0, best_acc))
    pending_exact = exact_obj
    pending_regroup = True

    for step in range(cfg.n_max):
        if step > 0:
            group, pending_exact, pending_regroup = ensure_group(step)
        inputs = merge_inputs(group)
        p_mix = merge(inputs)
        idx = np.array([rng.below(task.n_train) for _ in range(cfg.batch_size)], dtype=np.int64)
        loss, d_pmix = loss_and_grad_prompt(model, p_mix, (task.train_x[idx], task.train_y[idx]))
        grads: MergeGrads = merge_backward(inputs, d_pmix)

        state.target_tpv -= cfg.lr_target * grads.d_target_tpv
        state.target_alpha -= cfg.lr_target * grads.d_target_alpha
        for sid in group.selected:
            state.source_alphas[sid] -= cfg.lr_source_alpha * grads.d_source_alphas[sid]
        state.step = step + 1
        losses.append(loss)

        val_acc = None
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.n_max:
            p_eval = merge(merge_inputs(group))
            val_acc = evaluate_accuracy(model, p_eval, task.val_x, task.val_y)
            evals.append((step + 1, val_acc))
            if val_acc > best_acc:
                best_acc, best_step = val_acc, step + 1
                best_snapshot = (
                    state.target_tpv.copy(),
                    state.target_alpha.copy(),
                    {k: v.copy() for k, v in state.source_alphas.items()},
                    group,
                )

        if pending_regroup:
            state.history.append(
                HistoryEntry(step, group.selected, group.ts, group.kc, loss, val_acc)
            )
        extra: dict[str, Any] = {}
        if pending_regroup:
            extra["decisions"] = group.to_json_dict()["decisions"]
            extra["rank_list"] = list(group.rank_list)
        _emit(
            metrics_writer,
            records,
            make_metrics_record(
                step=step,
                mode=cfg.mode,
                selected=list(group.selected),
                ts=group.ts,
                kc=group.kc,
                greedy_objective=group.objective,
                exact_objective=pending_exact,
                train_loss=loss,
                val_accuracy=val_acc,
                **extra,
            ),
        )
        pending_exact = None
        pending_regroup = False

    if cfg.n_max == 0 and not state.history:
        state.history.append(HistoryEntry(0, group.selected, group.ts, group.kc, None, None))

    final_pmix = merge(merge_inputs(group))

    saved = (state.target_tpv, state.target_alpha, state.source_alphas)
    state.target_tpv, state.target_alpha, state.source_alphas = (
        best_snapshot[0],
        best_snapshot[1],
        best_snapshot[2],
    )
    best_pmix = merge(merge_inputs(best_snapshot[3]))
    state.target_tpv, state.target_alpha, state.source_alphas = saved

    test_acc = evaluate_accuracy(model, best_pmix, task.test_x, task.test_y)
    _emit(metrics_writer, records,
          _final_record(cfg, cfg.mode, list(group.selected), best_step, best_acc, test_acc))
    return TransferRun(
        mode=cfg.mode,
        final_pmix=final_pmix,
        state=state,
        losses=losses,
        evals=evals,
        best_step=best_step,
        best_val_accuracy=best_acc,
        test_accuracy=test_acc,
        metrics=records,
    )


@dataclass(frozen=True)
class StabilizationStats:
    regroup_events: int
    change_count: int
    changes_per_decile: tuple[int, ...]
    final_stable_events: int
    final_stable_steps: int


def stabilization_stats(history: Sequence[HistoryEntry], total_steps: int | None = None) -> StabilizationStats:
    """Reported-only summary of how the selected group settles over training."""
    if not history:
        raise ValueError("empty history")
    if total_steps is None:
        total_steps = history[-1].step + 1
    deciles = [0] * 10
    changes = 0
    last_change_pos = 0
    for i in range(1, len(history)):
        if set(history[i].selected) != set(history[i - 1].selected):
            changes += 1
            last_change_pos = i
            decile = min(9, 10 * history[i].step // max(1, total_steps))
            deciles[decile] += 1
    return StabilizationStats(
        regroup_events=len(history),
        change_count=changes,
        changes_per_decile=tuple(deciles),
        final_stable_events=len(history) - last_change_pos,
        final_stable_steps=total_steps - history[last_change_pos].step,
    )
