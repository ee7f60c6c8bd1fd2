import math

import numpy as np
import pytest
from scipy import stats

from trage.errors import PlanMismatch
from trage.masking import (
    FIELD_SCHEMAS,
    GeometricSampler,
    MaskKind,
    MaskPlan,
    MaskSeed,
    apply_mask,
    budget_for,
    compare_geometric,
    comparison_rows,
    field_length_counts,
    field_length_histogram,
    plan_field_mask,
    plan_random_mask,
    restore,
    run_lengths,
    sample_geometric,
    splitmix64,
)
from trage.tokenize import CLS, MASK, PAD, as_sequence, tokenize_bytes


def random_seq(rng, real_len, max_len=None):
    max_len = max_len or real_len + 4
    ids = np.zeros(max_len, dtype=np.int32)
    ids[0] = CLS
    ids[1:real_len] = rng.integers(5, 65541, real_len - 1)
    return as_sequence(ids)


def merged_chisquare(observed, expected, min_expected=5.0):
    """Merge adjacent tail bins until each expected count is at least ``min_expected``."""
    obs, exp = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(observed, expected):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            obs.append(o_acc)
            exp.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0:
        obs[-1] += o_acc
        exp[-1] += e_acc
    return stats.chisquare(obs, exp)


class TestGeometric:
    def test_pmf_values(self):
        s = GeometricSampler(0.7)
        assert s.pmf(1) == pytest.approx(0.7)
        assert s.pmf(2) == pytest.approx(0.21)
        assert s.pmf(3) == pytest.approx(0.063)
        assert s.pmf(0) == 0.0

    def test_pmf_sums_to_one(self):
        s = GeometricSampler(0.7)
        assert s.pmf(np.arange(1, 200)).sum() == pytest.approx(1.0, abs=1e-12)
        assert s.mean == pytest.approx(1 / 0.7)

    def test_inverse_cdf_median(self):
        assert GeometricSampler(0.7).from_uniform(0.5) == 1

    def test_inverse_cdf_boundaries(self):
        s = GeometricSampler(0.7)
        # CDF(1) = 0.7, CDF(2) = 0.91
        assert s.from_uniform(0.6999) == 1
        assert s.from_uniform(0.7001) == 2
        assert s.from_uniform(0.9101) == 3

    def test_p_one(self):
        s = GeometricSampler(1.0)
        rng = np.random.default_rng(0)
        assert all(sample_geometric(s, rng) == 1 for _ in range(100))

    @pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
    def test_invalid_p(self, p):
        with pytest.raises(ValueError):
            GeometricSampler(p)

    def test_mean_and_chisquare(self):
        s = GeometricSampler(0.7)
        draws = s.sample_many(1_000_000, np.random.default_rng(12345))
        assert abs(draws.mean() - 1 / 0.7) <= 0.01
        k_max = int(draws.max())
        observed = np.bincount(draws, minlength=k_max + 1)[1:]
        expected = s.pmf(np.arange(1, k_max + 1)) * len(draws)
        expected[-1] += len(draws) - expected.sum()  # tail mass into the last bin
        assert merged_chisquare(observed, expected).pvalue > 0.001


def test_splitmix_reference_values():
    # published test vector: splitmix64 seeded with 0 yields 0xE220A8397B1DCDAF
    assert splitmix64(0) == 0xE220A8397B1DCDAF


class TestFieldMask:
    def test_single_maskable(self):
        seq = tokenize_bytes(b"ab", 8)
        assert seq.real_len == 2
        plan = plan_field_mask(seq, GeometricSampler(0.7), 0.15, MaskSeed(0, 0, 0))
        assert set(plan.positions.tolist()) <= {1} and len(plan) <= 1

    def test_cls_only_gives_empty_plan(self):
        plan = plan_field_mask(tokenize_bytes(b"", 4), GeometricSampler(), 0.15, MaskSeed(0, 0, 0))
        assert len(plan) == 0

    def test_deterministic(self):
        seq = random_seq(np.random.default_rng(1), 64)
        a = plan_field_mask(seq, GeometricSampler(0.7), 0.15, MaskSeed(7, 3, 9))
        b = plan_field_mask(seq, GeometricSampler(0.7), 0.15, MaskSeed(7, 3, 9))
        assert a.same_positions(b) and a.spans == b.spans

    def test_never_masks_cls_or_pad_and_respects_budget(self):
        rng = np.random.default_rng(2)
        for i in range(300):
            n = int(rng.integers(32, 120))
            seq = random_seq(rng, n, 128)
            plan = plan_field_mask(seq, GeometricSampler(0.7), 0.15, MaskSeed(0, i, i))
            pos = plan.positions
            assert pos.min() >= 1 and pos.max() < n
            assert np.all(np.diff(pos) > 0)
            max_span = max(length for _, length, _ in plan.spans)
            maskable = n - 1
            assert len(pos) <= math.ceil(0.15 * maskable) + max_span - 1
            frac = len(pos) / maskable
            assert 0.15 * 0.5 <= frac <= 0.15 * 1.5 + max_span / maskable

    def test_spans_are_maximal_runs(self):
        seq = random_seq(np.random.default_rng(3), 64)
        for i in range(200):
            plan = plan_field_mask(seq, GeometricSampler(0.7), 0.15, MaskSeed(0, 0, i))
            assert sorted(run_lengths(plan.positions.tolist())) == sorted(l for _, l, _ in plan.spans)

    def test_overlong_span_truncated(self):
        seq = random_seq(np.random.default_rng(4), 4)
        plan = plan_field_mask(seq, GeometricSampler(0.01), 1.0, MaskSeed(0, 0, 0))
        assert plan.positions.tolist() == [1, 2, 3]
        assert plan.spans[0][2] is True

    def test_run_length_law(self):
        s = GeometricSampler(0.7)
        seq_rng = np.random.default_rng(99)
        runs = []
        for i in range(10_000):
            seq = random_seq(seq_rng, 64)
            runs += run_lengths(plan_field_mask(seq, s, 0.15, MaskSeed(5, 0, i)).positions.tolist())
        runs = np.array(runs)
        k_max = int(runs.max())
        observed = np.bincount(runs, minlength=k_max + 1)[1:]
        expected = s.pmf(np.arange(1, k_max + 1)) * len(runs)
        expected[-1] += len(runs) - expected.sum()
        assert merged_chisquare(observed, expected).pvalue > 0.001


class TestRandomMask:
    def test_budget(self):
        seq = random_seq(np.random.default_rng(0), 101)
        plan = plan_random_mask(seq, 0.15, MaskSeed(0, 0, 0))
        assert len(plan) == 15 and plan.kind is MaskKind.RANDOM

    def test_budget_formula(self):
        assert budget_for(0.15, 100) == 15
        assert budget_for(0.15, 101) == 16
        assert budget_for(0.15, 1) == 1

    def test_full_ratio(self):
        seq = random_seq(np.random.default_rng(0), 20)
        plan = plan_random_mask(seq, 1.0, MaskSeed(0, 0, 0))
        assert plan.positions.tolist() == list(range(1, 20))

    def test_inclusion_uniform(self):
        seq = random_seq(np.random.default_rng(0), 65)  # 64 maskable
        counts = np.zeros(65)
        n_plans = 10_000
        for i in range(n_plans):
            counts[plan_random_mask(seq, 0.15, MaskSeed(1, 0, i)).positions] += 1
        q = 10 / 64  # ceil(0.15 * 64) = 10 positions per plan
        sigma = math.sqrt(n_plans * q * (1 - q))
        assert counts[0] == 0
        assert np.all(np.abs(counts[1:] - n_plans * q) <= 3.5 * sigma)
        assert counts[1:].sum() == n_plans * 10


class TestApply:
    seq = as_sequence(np.array([CLS, 10, 11, 12, PAD, PAD], dtype=np.int32))

    def plan(self, positions):
        pos = np.array(positions, dtype=np.int64)
        return MaskPlan(pos, self.seq.ids[pos], MaskKind.RANDOM, 0.15)

    def test_empty_plan_identity(self):
        masked, targets = apply_mask(self.seq, self.plan([]))
        assert masked == self.seq and targets == {}

    def test_two_positions(self):
        masked, targets = apply_mask(self.seq, self.plan([2, 3]))
        assert masked.ids.tolist() == [CLS, 10, MASK, MASK, PAD, PAD]
        assert targets == {2: 11, 3: 12}
        assert restore(masked, targets) == self.seq

    @pytest.mark.parametrize("bad", [[0], [4], [1, 5]])
    def test_plan_mismatch(self, bad):
        with pytest.raises(PlanMismatch):
            apply_mask(self.seq, self.plan(bad))


class TestDynamic:
    def test_distinct_across_steps(self):
        rng = np.random.default_rng(7)
        s = GeometricSampler(0.7)
        same_fm = same_rm = 0
        for i in range(1000):
            seq = random_seq(rng, int(rng.integers(32, 100)), 128)
            a = plan_field_mask(seq, s, 0.15, MaskSeed(11, 4, i))
            b = plan_field_mask(seq, s, 0.15, MaskSeed(11, 5, i))
            same_fm += a.same_positions(b)
            same_rm += plan_random_mask(seq, 0.15, MaskSeed(11, 4, i)).same_positions(
                plan_random_mask(seq, 0.15, MaskSeed(11, 5, i))
            )
        assert same_fm <= 10 and same_rm <= 10

    def test_static_identical(self):
        seq = random_seq(np.random.default_rng(8), 64)
        plans = [plan_field_mask(seq, GeometricSampler(), 0.15, MaskSeed.static(3, 17)) for _ in range(5)]
        assert all(p.same_positions(plans[0]) for p in plans)

    def test_seed_components_matter(self):
        seeds = {MaskSeed(b, t, i).stream_seed() for b in range(4) for t in range(4) for i in range(4)}
        assert len(seeds) == 64


class TestFieldLengths:
    def test_udp_alone(self):
        assert field_length_histogram(["udp"]) == {2: 1.0}

    def test_ipv4_tcp_counts(self):
        # hand count: IPv4 has 1,1,2,2,2,1,1,2,4,4 and TCP has 2,2,4,4,2,2,2,2
        assert dict(field_length_counts(["ipv4", "tcp"])) == {1: 4, 2: 10, 4: 4}
        assert sum(len(FIELD_SCHEMAS[s]) for s in ("ipv4", "tcp")) == 18

    def test_schema_byte_totals(self):
        assert sum(l for _, l in FIELD_SCHEMAS["ipv4"]) == 20
        assert sum(l for _, l in FIELD_SCHEMAS["ipv6"]) == 40
        assert sum(l for _, l in FIELD_SCHEMAS["tcp"]) == 20
        assert sum(l for _, l in FIELD_SCHEMAS["udp"]) == 8

    def test_point_mass_tv_zero(self):
        assert compare_geometric({1: 1.0}, 1.0) == 0.0

    def test_tv_in_unit_interval(self):
        tv = compare_geometric(field_length_histogram(["ipv4", "tcp"]), 0.7)
        assert 0.0 <= tv <= 1.0

    def test_comparison_rows(self):
        rows = comparison_rows(field_length_histogram(["ipv4", "tcp"]), 0.7)
        assert [r[0] for r in rows] == [1, 2, 3, 4]
        assert rows[2][1] == 0.0
        assert sum(r[2] for r in rows) == pytest.approx(1.0)
        assert rows[0][1] == pytest.approx(4 / 18)

    def test_unknown_schema(self):
        with pytest.raises(ValueError):
            field_length_counts(["sctp"])
