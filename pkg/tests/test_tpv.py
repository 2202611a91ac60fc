import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtvg import numkit
from dtvg.numkit import Rng
from dtvg.tpv import (
    ScalingTerm,
    SoftPrompt,
    TaskPromptVector,
    compute_tpv,
    cosine_prompt_sim,
    prompt_fingerprint,
    rescale,
    sim,
)


def random_prompt(seed, d=4, r=3, std=1.0):
    return SoftPrompt(d, r, numkit.mat_randn(Rng(seed), d, r, std))


def tpv_pair(seed, d=4, r=3):
    p_init = random_prompt(seed, d, r)
    rng = Rng(seed + 1000)
    t1 = compute_tpv(
        SoftPrompt(d, r, p_init.weights + numkit.mat_randn(rng, d, r, 0.7)), p_init, "a"
    )
    t2 = compute_tpv(
        SoftPrompt(d, r, p_init.weights + numkit.mat_randn(rng, d, r, 0.7)), p_init, "b"
    )
    return p_init, t1, t2


def double_sum_sim(t1, t2):
    """O(r^2) oracle: (1/r^2) * sum_i sum_j v1_i . v2_j."""
    r = t1.r
    total = 0.0
    for i in range(r):
        for j in range(r):
            total += float(np.dot(t1.delta[:, i], t2.delta[:, j]))
    return total / (r * r)


class TestComputeTpv:
    def test_identical_prompts_zero_delta(self):
        p = random_prompt(0)
        t = compute_tpv(p, p, "t")
        assert np.array_equal(t.delta, np.zeros((4, 3)))

    def test_zero_init_gives_p_star(self):
        zero = SoftPrompt(4, 3, np.zeros((4, 3)))
        p = random_prompt(1)
        t = compute_tpv(p, zero, "t")
        assert np.array_equal(t.delta, p.weights)

    def test_matches_elementwise_oracle(self):
        a, b = random_prompt(2), random_prompt(3)
        t = compute_tpv(a, b, "t")
        for i in range(4):
            for j in range(3):
                assert t.delta[i, j] == a.weights[i, j] - b.weights[i, j]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            compute_tpv(random_prompt(0, d=4), random_prompt(0, d=5), "t")

    def test_reconstruction_exact_for_tuned_prompts(self):
        # p_star built as one rounded sum p_init + D, which is how the tuner
        # produces checkpoints; adding the extracted delta back is bit-exact.
        for seed in range(20):
            p_init = random_prompt(seed, d=8, r=6, std=0.5)
            displacement = numkit.mat_randn(Rng(seed + 99), 8, 6, 3.0)
            p_star = SoftPrompt(8, 6, p_init.weights + displacement)
            t = compute_tpv(p_star, p_init, "t")
            assert np.array_equal(p_init.weights + t.delta, p_star.weights)

    def test_fingerprint_recorded_from_init(self):
        p_init = random_prompt(4)
        t = compute_tpv(random_prompt(5), p_init, "t")
        assert t.init_fingerprint == prompt_fingerprint(p_init)


class TestRescale:
    def test_ones_identity(self):
        _, t, _ = tpv_pair(0)
        out = rescale(t, ScalingTerm.ones("a", t.r))
        assert np.array_equal(out.delta, t.delta)
        assert out.init_fingerprint == t.init_fingerprint

    def test_zeros(self):
        _, t, _ = tpv_pair(1)
        out = rescale(t, ScalingTerm("a", np.zeros(t.r)))
        assert np.array_equal(out.delta, np.zeros_like(t.delta))

    def test_bilinearity_under_uniform_scale(self):
        _, t1, t2 = tpv_pair(2)
        base = sim(t1, t2)
        doubled = sim(rescale(t1, ScalingTerm("a", np.full(t1.r, 2.0))), t2)
        assert abs(doubled - 2.0 * base) <= 1e-12 * max(1.0, abs(2.0 * base))

    def test_task_and_length_mismatch(self):
        _, t, _ = tpv_pair(3)
        with pytest.raises(ValueError):
            rescale(t, ScalingTerm("other", np.ones(t.r)))
        with pytest.raises(ValueError):
            rescale(t, ScalingTerm("a", np.ones(t.r + 1)))


class TestSim:
    def test_zero_tpv_gives_zero(self):
        p_init, t1, _ = tpv_pair(4)
        zero = TaskPromptVector("z", t1.d, t1.r, np.zeros((t1.d, t1.r)), t1.init_fingerprint)
        assert sim(t1, zero) == 0.0

    def test_orthogonal_pooled_columns(self):
        fp = 7
        e1 = np.zeros((4, 3))
        e1[0, :] = 1.0
        e2 = np.zeros((4, 3))
        e2[1, :] = 1.0
        t1 = TaskPromptVector("a", 4, 3, e1, fp)
        t2 = TaskPromptVector("b", 4, 3, e2, fp)
        assert sim(t1, t2) == 0.0

    def test_matches_double_sum_oracle(self):
        _, t1, t2 = tpv_pair(5)
        got = sim(t1, t2)
        expect = double_sum_sim(t1, t2)
        assert abs(got - expect) <= 1e-10 * max(1.0, abs(expect))

    @given(st.integers(0, 500))
    @settings(deadline=None, max_examples=30)
    def test_symmetry_exact(self, seed):
        _, t1, t2 = tpv_pair(seed)
        assert sim(t1, t2) == sim(t2, t1)

    def test_fingerprint_mismatch_rejected(self):
        _, t1, _ = tpv_pair(6)
        other = TaskPromptVector("b", t1.d, t1.r, t1.delta, t1.init_fingerprint ^ 1)
        with pytest.raises(ValueError, match="incomparable initializations"):
            sim(t1, other)

    def test_shape_mismatch_rejected(self):
        _, t1, _ = tpv_pair(7)
        bigger = TaskPromptVector("b", t1.d, t1.r + 1, np.zeros((t1.d, t1.r + 1)), t1.init_fingerprint)
        with pytest.raises(ValueError, match="incomparable shapes"):
            sim(t1, bigger)


class TestCosinePromptSim:
    def test_self_similarity_is_one(self):
        p = random_prompt(8)
        assert cosine_prompt_sim(p, p) == 1.0

    def test_antiparallel_is_minus_one(self):
        p = random_prompt(9)
        q = SoftPrompt(p.d, p.r, -2.0 * p.weights)
        assert cosine_prompt_sim(p, q) == -1.0

    def test_matches_direct_oracle(self):
        p, q = random_prompt(10), random_prompt(11)
        mp = np.mean(p.weights, axis=1)
        mq = np.mean(q.weights, axis=1)
        expect = float(np.dot(mp, mq) / (np.linalg.norm(mp) * np.linalg.norm(mq)))
        assert abs(cosine_prompt_sim(p, q) - expect) < 1e-10

    def test_degenerate_prompt_rejected(self):
        zero = SoftPrompt(4, 3, np.zeros((4, 3)))
        with pytest.raises(ValueError, match="degenerate prompt"):
            cosine_prompt_sim(zero, random_prompt(12))


class TestFingerprint:
    def test_sensitive_to_any_entry(self):
        p = random_prompt(13)
        w = np.array(p.weights)
        w[2, 1] += 1e-3
        assert prompt_fingerprint(p) != prompt_fingerprint(SoftPrompt(p.d, p.r, w))

    def test_matches_tpvf_payload_bytes(self):
        from dtvg.numkit import fnv1a64
        from dtvg.store_io import serialize_tpvf

        p = random_prompt(14)
        payload = serialize_tpvf(p, task_id="x")[-4 * p.d * p.r :]
        assert prompt_fingerprint(p) == fnv1a64(payload)
