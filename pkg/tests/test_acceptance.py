"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured margins. Run with `pytest tests/test_acceptance.py -v -s` to see
the per-criterion lines.
"""

import itertools
import time

import numpy as np
import pytest

from dtvg import experiments, numkit, store_io, transfer
from dtvg.cli import main as cli_main
from dtvg.grouping import (
    SimTable,
    exact_group,
    greedy_group,
    knowledge_consistency,
    target_similarity,
)
from dtvg.merging import MergeInputs, merge, merge_backward
from dtvg.numkit import Rng
from dtvg.testbed import (
    PromptTuneConfig,
    loss_and_grad_prompt,
    make_p_init,
    make_toy_model,
    prompt_tune_trace,
    subsample_few_shot,
)
from dtvg.tpv import ScalingTerm, SoftPrompt, TaskPromptVector, compute_tpv, rescale, sim


@pytest.fixture(scope="session")
def fixture_runs():
    """Stage-1 artifacts and the stage-2 mode matrix for seeds 0..4."""
    cfg = experiments.FixtureConfig()
    arts = {}
    runs = {}
    for seed in range(5):
        art = experiments.run_stage1(cfg, seed)
        arts[seed] = art
        for mode in ("dtvg_dynamic", "all_for_one", "no_transfer_pt", "fix_group"):
            runs[(mode, seed)] = transfer.run_transfer(
                art.model, art.target, art.source_tpvs, art.p_init,
                cfg.transfer_config(mode, seed),
            )
    return cfg, arts, runs


def random_tpv_pair(seed):
    rng = Rng(seed)
    d = 2 + rng.below(31)  # <= 32
    r = 1 + rng.below(16)  # <= 16
    fp = rng.next_u64()
    t1 = TaskPromptVector("a", d, r, numkit.mat_randn(rng, d, r, 1.0), fp)
    t2 = TaskPromptVector("b", d, r, numkit.mat_randn(rng, d, r, 1.0), fp)
    return t1, t2


def test_a1_similarity_algebra():
    start = time.monotonic()
    worst_identity = 0.0
    worst_bilinear = 0.0
    for seed in range(1000):
        t1, t2 = random_tpv_pair(seed)
        s = sim(t1, t2)
        assert s == sim(t2, t1)  # symmetry, exact
        # pooled form vs O(r^2) double sum
        double = 0.0
        for i in range(t1.r):
            for j in range(t1.r):
                double += float(np.dot(t1.delta[:, i], t2.delta[:, j]))
        double /= t1.r * t1.r
        worst_identity = max(worst_identity, abs(s - double) / max(1.0, abs(double)))
        # bilinearity under uniform rescale
        c = 0.5 + (seed % 7)
        scaled = sim(rescale(t1, ScalingTerm("a", np.full(t1.r, c))), t2)
        worst_bilinear = max(
            worst_bilinear, abs(scaled - c * s) / max(1.0, abs(c * s))
        )
    elapsed = time.monotonic() - start
    assert worst_identity < 1e-10
    assert worst_bilinear < 1e-12
    assert elapsed < 5.0
    print(f"[A1] PASS - identity err {worst_identity:.2e}, bilinearity err "
          f"{worst_bilinear:.2e}, {elapsed:.2f}s")


def test_a2_knowledge_consistency_formula():
    start = time.monotonic()
    worst = 0.0
    rng = Rng(2024)
    for trial in range(500):
        n = 2 + rng.below(9)
        s2t = np.array([2 * rng.uniform() - 1 for _ in range(n)])
        s2s = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                s2s[i, j] = s2s[j, i] = 2 * rng.uniform() - 1
        table = SimTable(tuple(f"s{i}" for i in range(n)), s2t, s2s)
        k = rng.below(n + 1)
        subset = rng.choice_indices(n, k)
        got = knowledge_consistency(table, subset)
        if k < 2:
            assert got == 0.0
        else:
            expect = (
                2.0 / (k * (k - 1))
                * sum(float(s2s[i, j]) for i, j in itertools.combinations(sorted(subset), 2))
            )
            worst = max(worst, abs(got - expect))
        assert knowledge_consistency(table, []) == 0.0
        assert knowledge_consistency(table, [rng.below(n)]) == 0.0
    elapsed = time.monotonic() - start
    assert worst < 1e-12
    assert elapsed < 5.0
    print(f"[A2] PASS - max oracle deviation {worst:.2e}, {elapsed:.2f}s")


def test_a3_greedy_vs_exact():
    start = time.monotonic()
    gaps = []
    rng = Rng(777)
    for trial in range(200):
        n = 1 + rng.below(8)
        s2t = np.array([2 * rng.uniform() - 1 for _ in range(n)])
        s2s = np.zeros((n, n))
        for i in range(n):
            s2s[i, i] = 2 * rng.uniform() - 1
            for j in range(i + 1, n):
                s2s[i, j] = s2s[j, i] = 2 * rng.uniform() - 1
        table = SimTable(tuple(f"s{i}" for i in range(n)), s2t, s2s)
        g = greedy_group(table)
        e = exact_group(table, 1.0)
        assert g.objective <= e.objective + 1e-12
        gaps.append(e.objective - g.objective)
        # admissibility invariants
        ids = {sid: i for i, sid in enumerate(table.source_ids)}
        prefix = []
        kc_prev = 0.0
        for sid in g.selected:
            assert table.s2t[ids[sid]] >= 0.0
            prefix.append(ids[sid])
            kc_now = knowledge_consistency(table, prefix)
            assert kc_now >= kc_prev - 1e-15  # monotone KC prefix
            kc_prev = kc_now
        for d in g.decisions:
            if d.admitted:
                assert d.s2t >= 0.0 and d.delta_kc >= 0.0
    elapsed = time.monotonic() - start
    assert elapsed < 30.0
    print(f"[A3] PASS - greedy <= exact on 200/200, mean optimality gap "
          f"{np.mean(gaps):.4f} (max {np.max(gaps):.4f}), {elapsed:.2f}s")


def test_a4_gradient_correctness():
    start = time.monotonic()
    step = 1e-5
    worst_merge = 0.0
    worst_prompt = 0.0

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    for trial in range(20):
        rng = Rng(numkit.derive_seed(31337, f"a4:{trial}"))
        d, r = 4 + rng.below(5), 2 + rng.below(4)
        p_init = SoftPrompt(d, r, numkit.mat_randn(rng, d, r, 0.5))
        from dtvg.tpv import prompt_fingerprint

        fp = prompt_fingerprint(p_init)
        t_t = TaskPromptVector("t", d, r, numkit.mat_randn(rng, d, r, 0.4), fp)
        a_t = ScalingTerm("t", numkit.mat_randn(rng, 1, r, 1.0)[0])
        t_s = TaskPromptVector("s", d, r, numkit.mat_randn(rng, d, r, 0.4), fp)
        a_s = ScalingTerm("s", numkit.mat_randn(rng, 1, r, 1.0)[0])
        anchor = numkit.mat_randn(rng, d, r, 1.0)

        def loss_of(t_delta, at, asrc):
            ins = MergeInputs(
                p_init,
                TaskPromptVector("t", d, r, t_delta, fp),
                ScalingTerm("t", at),
                ((t_s, ScalingTerm("s", asrc)),),
            )
            w = merge(ins).weights
            return 0.5 * float(np.sum((w - anchor) ** 2))

        inputs = MergeInputs(p_init, t_t, a_t, ((t_s, a_s),))
        grads = merge_backward(inputs, merge(inputs).weights - anchor)
        # sample a handful of scalar parameters of each kind
        for _ in range(10):
            i, j = rng.below(d), rng.below(r)
            delta = np.array(t_t.delta)
            delta[i, j] += step
            up = loss_of(delta, a_t.alpha, a_s.alpha)
            delta[i, j] -= 2 * step
            down = loss_of(delta, a_t.alpha, a_s.alpha)
            worst_merge = max(worst_merge, rel((up - down) / (2 * step), grads.d_target_tpv[i, j]))
        for j in range(r):
            at = np.array(a_t.alpha)
            at[j] += step
            up = loss_of(t_t.delta, at, a_s.alpha)
            at[j] -= 2 * step
            down = loss_of(t_t.delta, at, a_s.alpha)
            worst_merge = max(worst_merge, rel((up - down) / (2 * step), grads.d_target_alpha[j]))
            asrc = np.array(a_s.alpha)
            asrc[j] += step
            up = loss_of(t_t.delta, a_t.alpha, asrc)
            asrc[j] -= 2 * step
            down = loss_of(t_t.delta, a_t.alpha, asrc)
            worst_merge = max(
                worst_merge, rel((up - down) / (2 * step), grads.d_source_alphas["s"][j])
            )

        # testbed loss gradient
        model = make_toy_model(numkit.derive_seed(99, f"a4m:{trial}"), d=16)
        prompt = make_p_init(numkit.derive_seed(98, f"a4p:{trial}"), d=16, r=6)
        X = np.array([[rng.below(64) for _ in range(8)] for _ in range(12)])
        y = np.array([rng.below(2) for _ in range(12)])
        _, grad = loss_and_grad_prompt(model, prompt, (X, y))
        for _ in range(15):
            i, j = rng.below(16), rng.below(6)
            w = prompt.weights.copy()
            w[i, j] += step
            up, _ = loss_and_grad_prompt(model, SoftPrompt(16, 6, w), (X, y))
            w[i, j] -= 2 * step
            down, _ = loss_and_grad_prompt(model, SoftPrompt(16, 6, w), (X, y))
            worst_prompt = max(worst_prompt, rel((up - down) / (2 * step), grad[i, j]))
    elapsed = time.monotonic() - start
    assert worst_merge < 1e-4
    assert worst_prompt < 1e-4
    assert elapsed < 60.0
    print(f"[A4] PASS - merge grad err {worst_merge:.2e}, prompt grad err "
          f"{worst_prompt:.2e}, {elapsed:.2f}s")


def test_a5_merge_identities(fixture_runs):
    cfg, arts, _ = fixture_runs
    art = arts[0]
    # degenerate case 1: no sources, unit alpha, reconstructs every tuned
    # stage-1 prompt bit-exactly
    for tpv in [art.target_tpv] + art.source_tpvs:
        p_star = (
            art.target_prompt if tpv.task_id == "target" else art.source_prompts[tpv.task_id]
        )
        out = merge(MergeInputs(art.p_init, tpv, ScalingTerm.ones(tpv.task_id, tpv.r), ()))
        assert np.array_equal(out.weights, p_star.weights), tpv.task_id
    # degenerate case 2: all-zero TPVs reconstruct the initialization
    from dtvg.tpv import prompt_fingerprint

    fp = prompt_fingerprint(art.p_init)
    zero = TaskPromptVector("target", cfg.d, cfg.r, np.zeros((cfg.d, cfg.r)), fp)
    zero_sources = tuple(
        (TaskPromptVector(t.task_id, cfg.d, cfg.r, np.zeros((cfg.d, cfg.r)), fp),
         ScalingTerm.ones(t.task_id, cfg.r))
        for t in art.source_tpvs
    )
    out = merge(MergeInputs(art.p_init, zero, ScalingTerm.ones("target", cfg.r), zero_sources))
    assert np.array_equal(out.weights, art.p_init.weights)
    print("[A5] PASS - stage-1 prompts reconstructed bit-exactly; zero TPVs "
          "reproduce the initialization")


def test_a6_mode_reductions(fixture_runs):
    cfg, arts, _ = fixture_runs
    art = arts[0]
    short = cfg.transfer_config("only_target", 0, n_max=60)
    a = transfer.run_transfer(art.model, art.target, art.source_tpvs, art.p_init, short)
    b = transfer.run_transfer(
        art.model, art.target, [], art.p_init,
        cfg.transfer_config("dtvg_dynamic", 0, n_max=60),
    )
    assert a.losses == b.losses and a.evals == b.evals

    c = transfer.run_transfer(
        art.model, art.target, art.source_tpvs, art.p_init,
        cfg.transfer_config("fix_group", 0, n_max=60),
    )
    d = transfer.run_transfer(
        art.model, art.target, art.source_tpvs, art.p_init,
        cfg.transfer_config("dtvg_dynamic", 0, n_max=60, regroup_every=61),
    )
    assert c.losses == d.losses and c.evals == d.evals

    e = transfer.run_transfer(
        art.model, art.target, art.source_tpvs, art.p_init,
        cfg.transfer_config("no_transfer_pt", 0, n_max=60),
    )
    task = subsample_few_shot(art.target, cfg.few_shot_k, 0)
    trace = prompt_tune_trace(
        art.model, task,
        PromptTuneConfig(lr=cfg.lr_target, steps=60, batch_size=cfg.stage2_batch,
                         seed=0, eval_every=cfg.stage2_eval_every),
        art.p_init,
    )
    assert e.losses == trace.losses and e.evals == trace.evals
    print("[A6] PASS - only_target, fix_group, no_transfer_pt reduce exactly "
          "to their defining trajectories")


def test_a7_desk_scale_transfer_analog(fixture_runs):
    start = time.monotonic()
    cfg, arts, runs = fixture_runs
    gate_passes = 0
    for seed in range(5):
        h, c = experiments.validity_gate(arts[seed])
        gate_passes += h > c
    assert gate_passes >= 4, f"validity gate only {gate_passes}/5"

    dtvg = np.array([runs[("dtvg_dynamic", s)].test_accuracy for s in range(5)])
    afo = np.array([runs[("all_for_one", s)].test_accuracy for s in range(5)])
    nt = np.array([runs[("no_transfer_pt", s)].test_accuracy for s in range(5)])
    fix = np.array([runs[("fix_group", s)].test_accuracy for s in range(5)])

    wins_afo = int((dtvg > afo).sum())
    wins_nt = int((dtvg > nt).sum())
    assert wins_afo >= 4, f"dtvg beat all_for_one on only {wins_afo}/5 seeds"
    assert wins_nt >= 4, f"dtvg beat no_transfer_pt on only {wins_nt}/5 seeds"
    assert dtvg.mean() >= fix.mean(), (
        f"dtvg mean {dtvg.mean():.4f} < fix_group mean {fix.mean():.4f}"
    )
    elapsed = time.monotonic() - start
    print(
        f"[A7] PASS - gate {gate_passes}/5; dtvg beats all_for_one {wins_afo}/5 "
        f"and no_transfer {wins_nt}/5; means dtvg {dtvg.mean():.4f}, "
        f"all_for_one {afo.mean():.4f}, no_transfer {nt.mean():.4f}, "
        f"fix_group {fix.mean():.4f}; {elapsed:.1f}s"
    )


def test_a8_metric_comparison_analog():
    start = time.monotonic()
    cfg = experiments.FixtureConfig()
    trials = experiments.retrieval_trials(cfg, range(50))
    tpv_acc = sum(t.tpv_correct for t in trials)
    cos_acc = sum(t.cosine_correct for t in trials)
    elapsed = time.monotonic() - start
    assert tpv_acc >= cos_acc, f"TPV retrieval {tpv_acc}/50 < cosine {cos_acc}/50"
    assert elapsed < 300.0
    print(f"[A8] PASS - TPV retrieval {tpv_acc}/50 >= cosine retrieval "
          f"{cos_acc}/50, {elapsed:.1f}s")


SMALL_CONFIG = """
d = 16
stage1_steps = 60
n_max = 30
stage2_eval_every = 10
n_val = 64
n_test = 128
"""


def test_a9_format_and_determinism(tmp_path):
    # 100-file TPVF round-trip corpus
    rng = Rng(515151)
    for i in range(100):
        d, r = 1 + rng.below(8), 1 + rng.below(6)
        kind = store_io.KIND_TPV if rng.below(2) else store_io.KIND_PROMPT
        rec = store_io.TpvfRecord(
            kind, d, r,
            0 if kind == store_io.KIND_PROMPT else rng.next_u64(),
            f"corpus-{i}", numkit.mat_randn(rng, d, r, 2.0),
        )
        p1 = tmp_path / f"c{i}_a.tpvf"
        p2 = tmp_path / f"c{i}_b.tpvf"
        store_io.write_tpvf(p1, rec)
        store_io.write_tpvf(p2, store_io.read_tpvf(p1))
        assert p1.read_bytes() == p2.read_bytes(), f"corpus file {i} not bit-stable"

    # full pipeline rerun: byte-identical TPVF outputs and metric values
    config_path = tmp_path / "small.cfg"
    config_path.write_text(SMALL_CONFIG)
    outs = []
    for tag in ("r1", "r2"):
        s1 = tmp_path / tag / "s1"
        tr = tmp_path / tag / "tr"
        assert cli_main(["train-source", "--config", str(config_path), "--seed", "5",
                         "--out", str(s1)]) == 0
        assert cli_main(["transfer", "--config", str(config_path), "--seed", "5",
                         "--mode", "dtvg_dynamic", "--tpv-dir", str(s1),
                         "--out", str(tr)]) == 0
        outs.append((s1, tr))
    (s1a, tra), (s1b, trb) = outs
    names = sorted(p.name for p in s1a.glob("*.tpvf"))
    assert names, "no TPVF outputs produced"
    for name in names:
        assert (s1a / name).read_bytes() == (s1b / name).read_bytes(), name
    assert (s1a / "metrics.jsonl").read_bytes() == (s1b / "metrics.jsonl").read_bytes()
    for name in sorted(p.name for p in tra.glob("*.tpvf")):
        assert (tra / name).read_bytes() == (trb / name).read_bytes(), name
    ma = (tra / "metrics_dtvg_dynamic_seed5.jsonl").read_bytes()
    mb = (trb / "metrics_dtvg_dynamic_seed5.jsonl").read_bytes()
    assert ma == mb
    print("[A9] PASS - 100-file TPVF corpus bit-stable; pipeline rerun "
          "byte-identical (TPVF and metrics)")
