"""Standard experiment recipes built on the engine.

The "standard fixture" is one target task plus three helpful and three
conflicting sources. Stage 1 tunes every task from a shared initialization
on its full training data and extracts task prompt vectors; stage 2 runs any
transfer mode on a few-shot target. `compare_modes` runs the whole mode
matrix over seeds and aggregates a table.

Calibrated defaults (recorded here, used by the CLI and the acceptance
suite): model d=32, family noise 0.55 with helpful sources sharing
(1.0, 1.0, 0.5) of the target signal tokens and conflicting sources sharing
(1.0, 1.0, 0.75) with mirrored polarity; stage 1 at lr 5.0 for 300 steps
evaluated every 10; stage 2 at lr 2.0 for the target TPV and its scaling
term, 6.0 for source scaling terms (two-speed), 400 steps, few-shot k=16,
regrouping every step with a stage-1 warm start for the target TPV.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numkit import Rng, derive_seed
from .testbed import (
    PromptTuneConfig,
    SyntheticTask,
    TaskFamilySpec,
    ToyModel,
    make_p_init,
    make_task_family,
    make_toy_model,
    prompt_tune_trace,
)
from .transfer import MODES, TransferConfig, TransferRun, run_transfer
from .tpv import SoftPrompt, TaskPromptVector, compute_tpv, cosine_prompt_sim, sim


@dataclass(frozen=True)
class FixtureConfig:
    """Everything needed to reproduce the standard experiment end to end."""

    d: int = 32
    r: int = 8
    p_init_std: float = 0.5
    family: TaskFamilySpec = field(default_factory=TaskFamilySpec)
    stage1_lr: float = 5.0
    stage1_steps: int = 300
    stage1_batch: int = 32
    stage1_eval_every: int = 10
    n_max: int = 400
    lr_target: float = 2.0
    lr_source_alpha: float = 6.0
    stage2_batch: int = 16
    stage2_eval_every: int = 10
    regroup_every: int = 1
    few_shot_k: int | None = 16

    def flat_overrides(self, overrides: dict) -> "FixtureConfig":
        """Apply key=value overrides; family.* keys reach the task family."""
        fam_fields = {f.name for f in dataclasses.fields(TaskFamilySpec)}
        own_fields = {f.name for f in dataclasses.fields(FixtureConfig)}
        fam, own = {}, {}
        for key, value in overrides.items():
            if key in fam_fields:
                fam[key] = value
            elif key in own_fields and key != "family":
                own[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        cfg = dataclasses.replace(self, **own)
        if fam:
            cfg = dataclasses.replace(cfg, family=dataclasses.replace(cfg.family, **fam))
        return cfg

    def transfer_config(self, mode: str, seed: int, **overrides) -> TransferConfig:
        base = dict(
            n_max=self.n_max,
            lr_target=self.lr_target,
            lr_source_alpha=self.lr_source_alpha,
            batch_size=self.stage2_batch,
            seed=seed,
            mode=mode,
            regroup_every=self.regroup_every,
            eval_every=self.stage2_eval_every,
            few_shot_k=self.few_shot_k,
        )
        base.update(overrides)
        return TransferConfig(**base)


@dataclass
class Stage1Artifacts:
    model: ToyModel
    p_init: SoftPrompt
    target: SyntheticTask
    sources: list[SyntheticTask]
    source_tpvs: list[TaskPromptVector]
    target_tpv: TaskPromptVector  # full-data stage-1 fit of the target
    source_prompts: dict[str, SoftPrompt]
    target_prompt: SoftPrompt
    val_accuracies: dict[str, float]


def stage1_seed(base_seed: int, task_id: str) -> int:
    return derive_seed(base_seed, f"stage1:{task_id}")


def run_stage1(cfg: FixtureConfig, seed: int) -> Stage1Artifacts:
    """Tune every task in the family from the shared initialization."""
    model = make_toy_model(seed, d=cfg.d, vocab=cfg.family.vocab, classes=cfg.family.classes)
    p_init = make_p_init(seed, d=cfg.d, r=cfg.r, std=cfg.p_init_std)
    target, sources = make_task_family(cfg.family, Rng(derive_seed(seed, "family")))

    prompts: dict[str, SoftPrompt] = {}
    accs: dict[str, float] = {}
    tpvs: dict[str, TaskPromptVector] = {}
    for task in [target] + sources:
        tune = PromptTuneConfig(
            lr=cfg.stage1_lr,
            steps=cfg.stage1_steps,
            batch_size=cfg.stage1_batch,
            seed=stage1_seed(seed, task.task_id),
            eval_every=cfg.stage1_eval_every,
        )
        res = prompt_tune_trace(model, task, tune, p_init)
        prompts[task.task_id] = res.prompt
        accs[task.task_id] = res.best_val_accuracy
        tpvs[task.task_id] = compute_tpv(res.prompt, p_init, task.task_id)

    return Stage1Artifacts(
        model=model,
        p_init=p_init,
        target=target,
        sources=sources,
        source_tpvs=[tpvs[s.task_id] for s in sources],
        target_tpv=tpvs[target.task_id],
        source_prompts={s.task_id: prompts[s.task_id] for s in sources},
        target_prompt=prompts[target.task_id],
        val_accuracies=accs,
    )


def validity_gate(art: Stage1Artifacts) -> tuple[float, float]:
    """Mean helpful-to-target and conflicting-to-target similarities."""
    helpful = [s.task_id for s in art.sources if s.polarity == 1]
    conflicting = [s.task_id for s in art.sources if s.polarity == -1]
    by_id = {t.task_id: t for t in art.source_tpvs}
    h = float(np.mean([sim(by_id[i], art.target_tpv) for i in helpful]))
    c = float(np.mean([sim(by_id[i], art.target_tpv) for i in conflicting]))
    return h, c


@dataclass
class CompareCell:
    mode: str
    seed: int
    test_accuracy: float
    best_val_accuracy: float
    best_step: int


def compare_modes(
    cfg: FixtureConfig,
    seeds: Sequence[int],
    modes: Sequence[str] = MODES,
    metrics_dir=None,
) -> list[CompareCell]:
    """Run the mode matrix; stage-1 artifacts are shared within each seed."""
    from pathlib import Path

    from .store_io import MetricsWriter

    cells: list[CompareCell] = []
    for seed in seeds:
        art = run_stage1(cfg, seed)
        for mode in modes:
            writer = None
            if metrics_dir is not None:
                path = Path(metrics_dir) / f"metrics_{mode}_seed{seed}.jsonl"
                writer = MetricsWriter(path)
            try:
                run = run_transfer(
                    art.model,
                    art.target,
                    art.source_tpvs,
                    art.p_init,
                    cfg.transfer_config(mode, seed),
                    metrics_writer=writer,
                )
            finally:
                if writer is not None:
                    writer.close()
            cells.append(
                CompareCell(mode, seed, run.test_accuracy, run.best_val_accuracy, run.best_step)
            )
    return cells


def aggregate_table(cells: Sequence[CompareCell]) -> list[dict]:
    """Per-mode mean and standard deviation of test accuracy."""
    rows = []
    for mode in dict.fromkeys(c.mode for c in cells):
        accs = [c.test_accuracy for c in cells if c.mode == mode]
        rows.append(
            {
                "mode": mode,
                "n_seeds": len(accs),
                "mean_test_accuracy": float(np.mean(accs)),
                "sd_test_accuracy": float(np.std(accs)),
            }
        )
    return rows


@dataclass
class RetrievalTrial:
    seed: int
    tpv_pick: str
    cosine_pick: str
    tpv_correct: bool
    cosine_correct: bool


def retrieval_trials(cfg: FixtureConfig, seeds: Sequence[int]) -> list[RetrievalTrial]:
    """Top-1 source retrieval by TPV similarity vs cosine of pooled prompts.

    A retrieval counts as correct when the picked source is helpful by
    construction. Both metrics see exactly the same stage-1 artifacts.
    """
    from .numkit import argmax_with_lowest_index_tiebreak

    trials = []
    for seed in seeds:
        art = run_stage1(cfg, seed)
        helpful = {s.task_id for s in art.sources if s.polarity == 1}
        ids = [t.task_id for t in art.source_tpvs]
        tpv_scores = np.array([sim(t, art.target_tpv) for t in art.source_tpvs])
        cos_scores = np.array(
            [
                cosine_prompt_sim(art.source_prompts[i], art.target_prompt)
                for i in ids
            ]
        )
        tpv_pick = ids[argmax_with_lowest_index_tiebreak(tpv_scores)]
        cos_pick = ids[argmax_with_lowest_index_tiebreak(cos_scores)]
        trials.append(
            RetrievalTrial(seed, tpv_pick, cos_pick, tpv_pick in helpful, cos_pick in helpful)
        )
    return trials
