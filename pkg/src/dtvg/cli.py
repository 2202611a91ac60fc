"""Command-line surface for the engine.

Commands: gen-tasks, train-source, train-target-baseline, group, transfer,
compare, plot-data, fdcheck. Every run writes a manifest plus a JSONL
metrics stream into the output directory and prints a one-line summary.
Flags override config-file values; the DTVG_OUT_DIR environment variable
provides the default output root.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, configfile, experiments, store_io
from .grouping import exact_group, greedy_group, SimTable
from .merging import MergeInputs, merge, merge_backward
from .numkit import Rng, derive_seed
from .testbed import (
    PromptTuneConfig,
    fd_check_prompt_grad,
    make_task_family,
    prompt_tune_trace,
    subsample_few_shot,
)
from .transfer import MODES, build_sim_table, run_transfer
from .tpv import ScalingTerm, SoftPrompt, TaskPromptVector, compute_tpv, prompt_fingerprint, sim

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _out_dir(args) -> Path:
    root = args.out or os.environ.get("DTVG_OUT_DIR") or "."
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_fixture_config(args) -> experiments.FixtureConfig:
    cfg = experiments.FixtureConfig()
    if getattr(args, "config", None):
        cfg = cfg.flat_overrides(configfile.load_config_file(args.config))
    overrides = {}
    if getattr(args, "k", None) is not None:
        overrides["few_shot_k"] = args.k if args.k > 0 else None
    if getattr(args, "regroup_every", None) is not None:
        overrides["regroup_every"] = args.regroup_every
    if overrides:
        cfg = cfg.flat_overrides(overrides)
    return cfg


def _config_dict(cfg: experiments.FixtureConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["family"]["conflict_shared_fractions"] = list(d["family"]["conflict_shared_fractions"])
    return d


def _write_manifest(out: Path, command: str, cfg, seed: int, inputs: dict[str, str],
                    outputs: list[Path], started: str) -> None:
    manifest = store_io.RunManifest(
        engine_version=__version__,
        command=command,
        config=cfg,
        seed=seed,
        input_fingerprints=inputs,
        started_at=started,
        finished_at=_now(),
        output_hash=store_io.tree_content_hash(outputs, out) if outputs else "",
    )
    manifest.save(out / "manifest.json")


def cmd_gen_tasks(args) -> int:
    started = _now()
    cfg = _load_fixture_config(args)
    out = _out_dir(args)
    target, sources = make_task_family(cfg.family, Rng(derive_seed(args.seed, "family")))
    summary = []
    for task in [target] + sources:
        labels, counts = np.unique(task.train_y, return_counts=True)
        summary.append(
            {
                "task_id": task.task_id,
                "polarity": task.polarity,
                "signal_tokens": [list(s) for s in task.signal_tokens],
                "noise_rate": task.noise_rate,
                "seq_len": task.seq_len,
                "splits": {
                    "train": task.train_x.shape[0],
                    "val": task.val_x.shape[0],
                    "test": task.test_x.shape[0],
                },
                "train_label_counts": {int(l): int(c) for l, c in zip(labels, counts)},
                "train_content_hash": store_io.hashlib.sha256(
                    task.train_x.tobytes() + task.train_y.tobytes()
                ).hexdigest(),
            }
        )
    path = out / "family.json"
    path.write_text(json.dumps({"seed": args.seed, "tasks": summary}, indent=2) + "\n")
    _write_manifest(out, "gen-tasks", _config_dict(cfg), args.seed, {}, [path], started)
    print(f"gen-tasks: wrote {len(summary)} tasks to {path}")
    return 0


def _stage1_outputs(art: experiments.Stage1Artifacts, out: Path) -> list[Path]:
    paths = []
    p = out / "p_init.tpvf"
    store_io.write_tpvf(p, art.p_init, task_id="p_init")
    paths.append(p)
    for tpv in art.source_tpvs:
        p = out / f"tpv_{tpv.task_id}.tpvf"
        store_io.write_tpvf(p, tpv)
        paths.append(p)
    return paths


def cmd_train_source(args) -> int:
    started = _now()
    cfg = _load_fixture_config(args)
    out = _out_dir(args)
    art = experiments.run_stage1(cfg, args.seed)
    paths = _stage1_outputs(art, out)
    target_path = out / "tpv_target_full.tpvf"
    store_io.write_tpvf(target_path, art.target_tpv)
    paths.append(target_path)
    metrics_path = out / "metrics.jsonl"
    with store_io.MetricsWriter(metrics_path) as writer:
        for task_id, acc in art.val_accuracies.items():
            writer.write(
                store_io.make_metrics_record(
                    step=cfg.stage1_steps, mode="stage1", selected=[task_id],
                    ts=0.0, kc=0.0, greedy_objective=None, exact_objective=None,
                    train_loss=None, val_accuracy=acc, task_id=task_id,
                )
            )
    paths.append(metrics_path)
    _write_manifest(out, "train-source", _config_dict(cfg), args.seed, {}, paths, started)
    accs = " ".join(f"{k}={v:.3f}" for k, v in sorted(art.val_accuracies.items()))
    print(f"train-source: {len(art.source_tpvs)} TPVF files in {out} | val {accs}")
    return 0


def cmd_train_target_baseline(args) -> int:
    """Plain prompt tuning of the (optionally few-shot) target.

    Runs the exact stage-2 recipe with no sources, so it matches
    `transfer --mode no_transfer_pt` trajectory for trajectory.
    """
    started = _now()
    cfg = _load_fixture_config(args)
    out = _out_dir(args)
    target, _ = make_task_family(cfg.family, Rng(derive_seed(args.seed, "family")))
    model = experiments.make_toy_model(
        args.seed, d=cfg.d, vocab=cfg.family.vocab, classes=cfg.family.classes
    )
    p_init = experiments.make_p_init(args.seed, d=cfg.d, r=cfg.r, std=cfg.p_init_std)
    task = target
    if cfg.few_shot_k is not None:
        task = subsample_few_shot(task, cfg.few_shot_k, args.seed)
    tune = PromptTuneConfig(
        lr=cfg.lr_target, steps=cfg.n_max, batch_size=cfg.stage2_batch,
        seed=args.seed, eval_every=cfg.stage2_eval_every,
    )
    res = prompt_tune_trace(model, task, tune, p_init)
    tpv = compute_tpv(res.prompt, p_init, "target")
    paths = [out / "p_init.tpvf", out / "tpv_target.tpvf"]
    store_io.write_tpvf(paths[0], p_init, task_id="p_init")
    store_io.write_tpvf(paths[1], tpv)
    metrics_path = out / "metrics.jsonl"
    with store_io.MetricsWriter(metrics_path) as writer:
        eval_at = dict(res.evals)
        for step, loss in enumerate(res.losses):
            writer.write(
                store_io.make_metrics_record(
                    step=step, mode="train_target_baseline", selected=[],
                    ts=0.0, kc=0.0, greedy_objective=None, exact_objective=None,
                    train_loss=loss, val_accuracy=eval_at.get(step + 1),
                )
            )
    paths.append(metrics_path)
    _write_manifest(out, "train-target-baseline", _config_dict(cfg), args.seed, {}, paths, started)
    print(
        f"train-target-baseline: best val accuracy {res.best_val_accuracy:.4f} "
        f"at step {res.best_step}; artifacts in {out}"
    )
    return 0


def _read_tpv(path: str) -> TaskPromptVector:
    return store_io.read_tpvf(path).to_task_prompt_vector()


def cmd_group(args) -> int:
    started = _now()
    out = _out_dir(args)
    target = _read_tpv(args.target)
    sources = [_read_tpv(p) for p in args.sources]
    ones = {t.task_id: np.ones(t.r) for t in sources}
    table = build_sim_table(sources, ones, target, np.ones(target.r))
    greedy = greedy_group(table)
    exact = exact_group(table, args.lam)
    report = {
        "greedy": greedy.to_json_dict(),
        "exact": exact.to_json_dict(),
        "lambda": args.lam,
        "s2t": {i: float(v) for i, v in zip(table.source_ids, table.s2t)},
    }
    path = out / "grouping.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    inputs = {p: store_io.file_sha256(p) for p in [args.target] + list(args.sources)}
    _write_manifest(out, "group", {"lambda": args.lam}, args.seed, inputs, [path], started)
    sel = ",".join(greedy.selected) if greedy.selected else "-"
    print(
        f"group: selected={{{sel}}} TS={greedy.ts:.4f} KC={greedy.kc:.4f} "
        f"greedy_objective={greedy.objective:.4f} exact_objective={exact.objective:.4f}"
    )
    return 0


def cmd_transfer(args) -> int:
    started = _now()
    cfg = _load_fixture_config(args)
    out = _out_dir(args)
    mode = args.mode or "dtvg_dynamic"
    if mode not in MODES:
        print(f"error: unknown mode {mode!r}; choose from {', '.join(MODES)}", file=sys.stderr)
        return USAGE_ERROR

    model = experiments.make_toy_model(
        args.seed, d=cfg.d, vocab=cfg.family.vocab, classes=cfg.family.classes
    )
    target, _ = make_task_family(cfg.family, Rng(derive_seed(args.seed, "family")))
    inputs: dict[str, str] = {}
    if args.tpv_dir:
        tpv_dir = Path(args.tpv_dir)
        p_init = store_io.read_tpvf(tpv_dir / "p_init.tpvf").to_soft_prompt()
        source_tpvs = []
        for path in sorted(tpv_dir.glob("tpv_*.tpvf")):
            if path.name == "tpv_target_full.tpvf":
                continue
            source_tpvs.append(_read_tpv(path))
            inputs[str(path)] = store_io.file_sha256(path)
        inputs[str(tpv_dir / "p_init.tpvf")] = store_io.file_sha256(tpv_dir / "p_init.tpvf")
    else:
        art = experiments.run_stage1(cfg, args.seed)
        p_init, source_tpvs = art.p_init, art.source_tpvs

    metrics_path = out / f"metrics_{mode}_seed{args.seed}.jsonl"
    with store_io.MetricsWriter(metrics_path) as writer:
        run = run_transfer(
            model, target, source_tpvs, p_init,
            cfg.transfer_config(mode, args.seed), metrics_writer=writer,
        )
    pmix_path = out / f"pmix_{mode}_seed{args.seed}.tpvf"
    store_io.write_tpvf(pmix_path, run.final_pmix, task_id=f"pmix:{mode}")
    _write_manifest(
        out, "transfer", _config_dict(cfg) | {"mode": mode}, args.seed, inputs,
        [metrics_path, pmix_path], started,
    )
    print(
        f"transfer[{mode}]: best val {run.best_val_accuracy:.4f} at step {run.best_step}, "
        f"test {run.test_accuracy:.4f}; metrics in {metrics_path}"
    )
    if len(run.state.history) > 1:
        from .transfer import stabilization_stats

        stats = stabilization_stats(run.state.history, cfg.n_max)
        print(
            f"  grouping: {stats.change_count} changes over {stats.regroup_events} regroups, "
            f"changes per decile {list(stats.changes_per_decile)}, "
            f"stable for the final {stats.final_stable_steps} steps (reported, not asserted)"
        )
    return 0


def cmd_compare(args) -> int:
    started = _now()
    cfg = _load_fixture_config(args)
    out = _out_dir(args)
    seeds = list(range(args.seeds))
    cells = experiments.compare_modes(cfg, seeds, metrics_dir=out)
    for cell in cells:
        path = out / f"summary_{cell.mode}_seed{cell.seed}.json"
        path.write_text(json.dumps(dataclasses.asdict(cell)) + "\n")
    rows = experiments.aggregate_table(cells)
    table_path = out / "compare.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    outputs = sorted(out.glob("metrics_*.jsonl")) + sorted(out.glob("summary_*.json"))
    _write_manifest(out, "compare", _config_dict(cfg), 0, {}, outputs + [table_path], started)
    width = max(len(r["mode"]) for r in rows)
    print(f"{'mode'.ljust(width)}  mean_test_acc  sd")
    for r in rows:
        print(f"{r['mode'].ljust(width)}  {r['mean_test_accuracy']:.4f}         {r['sd_test_accuracy']:.4f}")
    return 0


def cmd_plot_data(args) -> int:
    out = _out_dir(args)
    rows = []
    for path in args.metrics:
        prev_selected = None
        for rec in store_io.read_metrics(path):
            selected = rec["selected"]
            rows.append(
                {
                    "file": Path(path).name,
                    "step": rec["step"],
                    "mode": rec["mode"],
                    "ts": rec["ts"],
                    "kc": rec["kc"],
                    "greedy_objective": rec["greedy_objective"],
                    "exact_objective": rec["exact_objective"],
                    "train_loss": rec["train_loss"],
                    "val_accuracy": rec["val_accuracy"],
                    "group_size": len(selected),
                    "group_changed": int(prev_selected is not None and set(selected) != set(prev_selected)),
                    "selected": "|".join(selected),
                }
            )
            prev_selected = selected
    if not rows:
        print("error: no metrics records found", file=sys.stderr)
        return RUNTIME_ERROR
    path = out / "plot_data.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"plot-data: {len(rows)} rows to {path}")
    return 0


def cmd_fdcheck(args) -> int:
    cfg = _load_fixture_config(args)
    worst_prompt = 0.0
    worst_merge = 0.0
    for trial in range(args.trials):
        seed = derive_seed(args.seed, f"fdcheck:{trial}")
        model = experiments.make_toy_model(seed, d=cfg.d, vocab=cfg.family.vocab,
                                           classes=cfg.family.classes)
        rng = Rng(derive_seed(seed, "data"))
        p_init = experiments.make_p_init(seed, d=cfg.d, r=cfg.r, std=cfg.p_init_std)
        X = np.array(
            [[rng.below(cfg.family.vocab) for _ in range(cfg.family.seq_len)] for _ in range(8)]
        )
        y = np.array([rng.below(cfg.family.classes) for _ in range(8)])
        worst_prompt = max(
            worst_prompt, fd_check_prompt_grad(model, p_init, (X, y), n_entries=30, seed=seed)
        )
        fp = prompt_fingerprint(p_init)
        from .numkit import mat_randn

        t_t = TaskPromptVector("t", cfg.d, cfg.r, mat_randn(rng, cfg.d, cfg.r, 0.3), fp)
        t_s = TaskPromptVector("s", cfg.d, cfg.r, mat_randn(rng, cfg.d, cfg.r, 0.3), fp)
        a_t = ScalingTerm("t", mat_randn(rng, 1, cfg.r, 1.0)[0])
        a_s = ScalingTerm("s", mat_randn(rng, 1, cfg.r, 1.0)[0])
        inputs = MergeInputs(p_init, t_t, a_t, ((t_s, a_s),))
        anchor = mat_randn(rng, cfg.d, cfg.r, 1.0)

        def loss_of(ins: MergeInputs) -> float:
            w = merge(ins).weights
            return 0.5 * float(np.sum((w - anchor) ** 2))

        grads = merge_backward(inputs, merge(inputs).weights - anchor)
        h = 1e-5
        for j in range(cfg.r):
            up = np.array(a_t.alpha)
            up[j] += h
            down = np.array(a_t.alpha)
            down[j] -= h
            fd = (
                loss_of(MergeInputs(p_init, t_t, ScalingTerm("t", up), ((t_s, a_s),)))
                - loss_of(MergeInputs(p_init, t_t, ScalingTerm("t", down), ((t_s, a_s),)))
            ) / (2 * h)
            denom = max(abs(fd), abs(grads.d_target_alpha[j]), 1e-8)
            worst_merge = max(worst_merge, abs(fd - grads.d_target_alpha[j]) / denom)
    ok = worst_prompt < 1e-4 and worst_merge < 1e-4
    print(
        f"fdcheck: prompt-grad max rel err {worst_prompt:.3e}, "
        f"merge-grad max rel err {worst_merge:.3e} -> {'OK' if ok else 'FAIL'}"
    )
    return 0 if ok else RUNTIME_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtvg",
        description="Dynamic task vector grouping experiments on the toy testbed",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory (default: $DTVG_OUT_DIR or .)")

    p = sub.add_parser("gen-tasks", help="emit a task family summary from a spec")
    common(p)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train-source", help="stage 1 over each source; writes TPVF files")
    common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("train-target-baseline", help="plain prompt tuning on the target")
    common(p)
    p.add_argument("--k", type=int, help="few-shot examples per class (0 disables)")
    p.set_defaults(func=cmd_train_target_baseline)

    p = sub.add_parser("group", help="one-shot grouping report from TPVF inputs")
    common(p, config=False)
    p.add_argument("--target", required=True, help="target TPV file")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("sources", nargs="+", help="source TPV files")
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("transfer", help="stage 2 in any mode")
    common(p)
    p.add_argument("--mode", choices=MODES, default="dtvg_dynamic")
    p.add_argument("--k", type=int, help="few-shot examples per class (0 disables)")
    p.add_argument("--regroup-every", dest="regroup_every", type=int)
    p.add_argument("--tpv-dir", help="directory with p_init.tpvf and tpv_*.tpvf")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("compare", help="run the mode matrix over seeds")
    common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--k", type=int)
    p.add_argument("--regroup-every", dest="regroup_every", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot-data", help="reduce metrics JSONL to plot-ready CSV")
    common(p, config=False)
    p.add_argument("metrics", nargs="+", help="metrics JSONL files")
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("fdcheck", help="finite-difference gradient check suite")
    common(p)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_fdcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr in ("config", "target", "tpv_dir"):
        value = getattr(args, attr, None)
        if value and not Path(value).exists():
            print(f"error: missing input {value}", file=sys.stderr)
            return USAGE_ERROR
    for path in getattr(args, "sources", []) or []:
        if not Path(path).exists():
            print(f"error: missing input {path}", file=sys.stderr)
            return USAGE_ERROR
    for path in getattr(args, "metrics", []) or []:
        if not Path(path).exists():
            print(f"error: missing input {path}", file=sys.stderr)
            return USAGE_ERROR
    try:
        return args.func(args)
    except Exception as exc:  # structured runtime failure -> exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("DTVG_DEBUG"):
            traceback.print_exc()
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
