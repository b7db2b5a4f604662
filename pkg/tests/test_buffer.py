import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compcil.buffer import (BudgetError, MemoryBudget, allocate, equivalent_capacity, herding_select,
                            minimum_budget_bytes, read_manifest, rebuild_buffer)
from compcil.codecs import CodecSpec
from compcil.tasks import DatasetHandle, Split, preprocess_with_codec


def herding_oracle(features, k):
    """Greedy herding in exact rationals, ties to the lowest index."""
    rows = [[Fraction(float(v)) for v in r] for r in features]
    n, d = len(rows), len(rows[0])
    mu = [sum(r[j] for r in rows) / n for j in range(d)]
    chosen, acc = [], [Fraction(0)] * d
    for t in range(1, k + 1):
        best, best_dist = None, None
        for i in range(n):
            if i in chosen:
                continue
            dist = sum((mu[j] - (acc[j] + rows[i][j]) / t) ** 2 for j in range(d))
            if best_dist is None or dist < best_dist:
                best, best_dist = i, dist
        chosen.append(best)
        acc = [acc[j] + rows[best][j] for j in range(d)]
    return chosen


class TestEquivalentCapacity:
    def test_equal_rates_keep_count(self):
        assert equivalent_capacity(MemoryBudget(3072 * 2000, 2000, 24.0, 24.0)) == 2000

    def test_cifar_example(self):
        budget = MemoryBudget.from_reference(1000, 3072, 24.0, 1.148)
        assert budget.bytes == 3_072_000
        assert budget.bytes / 2**20 == pytest.approx(2.93, abs=5e-3)
        assert equivalent_capacity(budget) == 20905

    def test_integral_ratio_does_not_lose_a_unit(self):
        assert equivalent_capacity(MemoryBudget(1, 1000, 24.0, 3.0)) == 8000
        assert equivalent_capacity(MemoryBudget(1, 7, 2.4, 0.8)) == math.floor(Fraction(7) * Fraction(2.4)
                                                                              / Fraction(0.8))

    def test_monotone_in_rate(self):
        caps = [equivalent_capacity(MemoryBudget(1, 500, 24.0, c)) for c in (0.5, 1, 2, 4, 8, 24)]
        assert caps == sorted(caps, reverse=True)

    def test_rejects_bad_rates(self):
        with pytest.raises(BudgetError):
            MemoryBudget(100, 10, 24.0, 0.0)
        with pytest.raises(BudgetError):
            MemoryBudget(0, 10, 24.0, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 10**6), st.floats(0.01, 48), st.floats(0.01, 48))
    def test_matches_rational_floor(self, ref, ori, comp):
        expected = (ref * Fraction(ori)) // Fraction(comp)
        assert equivalent_capacity(MemoryBudget(1, ref, ori, comp)) == expected

    def test_minimum_budget_covers_classes(self):
        b = MemoryBudget.from_reference(3, 3072, 24.0, 6.0)
        need = minimum_budget_bytes(20, b)
        assert equivalent_capacity(MemoryBudget(need, math.ceil(need / 3072), 24.0, 6.0)) >= 20


class TestHerding:
    def test_single_sample(self):
        assert herding_select([[0.3, 0.1]], 1) == [0]

    def test_identical_features_in_index_order(self):
        assert herding_select(np.ones((4, 3)), 4) == [0, 1, 2, 3]

    def test_first_pick_is_closest_to_mean(self):
        x = np.array([[10.0, 0], [0.9, 1.1], [-8, 2], [1, 1.0]])
        assert herding_select(x, 1) == [3]

    def test_k_bounds(self):
        with pytest.raises(ValueError):
            herding_select(np.zeros((3, 2)), 4)
        with pytest.raises(ValueError):
            herding_select(np.zeros((0, 2)), 0)

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_oracle_integer_features(self, seed):
        rng = np.random.default_rng(seed)
        n, d = rng.integers(1, 9), rng.integers(1, 5)
        x = rng.integers(-3, 4, size=(n, d)).astype(float)
        assert herding_select(x, n) == herding_oracle(x, n)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_oracle_float_features(self, seed):
        rng = np.random.default_rng(1000 + seed)
        x = rng.normal(size=(rng.integers(1, 9), rng.integers(1, 5)))
        assert herding_select(x, len(x)) == herding_oracle(x, len(x))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.int8, st.tuples(st.integers(1, 8), st.integers(1, 4)), elements=st.integers(-5, 5)),
           st.data())
    def test_prefix_property(self, feats, data):
        x = feats.astype(float)
        k = data.draw(st.integers(0, len(x)))
        full = herding_select(x, len(x))
        assert herding_select(x, k) == full[:k]
        assert sorted(full) == list(range(len(x)))


class TestAllocate:
    def test_even(self):
        assert allocate(10, 20) == [2] * 10

    def test_remainder_to_lowest_ids(self):
        assert allocate(10, 25) == [3] * 5 + [2] * 5

    @settings(max_examples=100)
    @given(st.integers(1, 200), st.integers(0, 5000))
    def test_sums_to_capacity(self, classes, cap):
        q = allocate(classes, cap)
        assert sum(q) == cap and max(q) - min(q) <= 1 and q == sorted(q, reverse=True)


def variable_dataset(num_classes=3, per_class=8, seed=0):
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            h, w = rng.integers(6, 20, size=2)
            imgs.append(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
            labels.append(c)
    y = np.array(labels)
    return DatasetHandle("var", Split(imgs, y), Split(imgs[:num_classes], y[:num_classes]))


class TestRebuild:
    def setup_method(self):
        self.ds = preprocess_with_codec(variable_dataset(), CodecSpec("jpeg", 50))
        self.feats = np.random.default_rng(1).normal(size=(len(self.ds.train), 5))

    def build(self, budget, classes=(0, 1, 2), candidates=None, previous=None):
        split = self.ds.train
        cand = np.flatnonzero(np.isin(split.labels, classes)) if candidates is None else candidates
        return rebuild_buffer(split, cand, self.feats[cand], classes, budget, self.ds.codec, previous)

    def test_within_budget_and_balanced(self):
        mean_bytes = float(self.ds.train.bits.mean() / 8)
        budget = MemoryBudget(int(9 * mean_bytes), 9, 24.0, 24.0)
        buf = self.build(budget)
        assert buf.total_bits <= budget.bits
        counts = buf.counts()
        assert set(counts) == {0, 1, 2}
        assert max(counts.values()) - min(counts.values()) <= 1
        assert len(buf.load()) == len(buf)

    def test_tight_budget_trims_largest_class_tail(self):
        per = self.ds.train.bits
        # capacity says 2 per class but the bits only fit the smallest few
        budget = MemoryBudget(int(per.min()) * 6 // 8, 6, 24.0, 24.0)
        buf = self.build(budget)
        assert buf.total_bits <= budget.bits
        assert all(v >= 1 for v in buf.counts().values())

    def test_too_small_names_minimum(self):
        budget = MemoryBudget(10, 2, 24.0, 24.0)
        with pytest.raises(BudgetError, match="need at least"):
            self.build(budget)

    def test_old_classes_keep_herding_prefix(self):
        y = self.ds.train.labels
        first = np.flatnonzero(y < 2)
        big = MemoryBudget(10**7, 8, 24.0, 24.0)
        b0 = self.build(big, (0, 1), first)
        second = np.flatnonzero(y == 2)
        b1 = self.build(big, (0, 1, 2), second, b0)
        for c in (0, 1):
            kept = [e.sample_id for e in b1.entries if e.label == c]
            assert kept == b0.herding_order[c][:len(kept)]
        assert len(b1) == 8

    def test_manifest_round_trip(self, tmp_path):
        buf = self.build(MemoryBudget(10**6, 6, 24.0, 24.0))
        buf.write_manifest(tmp_path / "m.csv", 0)
        buf.write_manifest(tmp_path / "m.csv", 1, append=True)
        rows = read_manifest(tmp_path / "m.csv")
        assert len(rows) == 2 * len(buf)
        assert sum(r["bits"] for r in rows if r["step"] == 1) == buf.total_bits

    @pytest.mark.parametrize("seed", range(50))
    def test_randomised_budget_audit(self, seed):
        rng = np.random.default_rng(seed)
        ref = int(rng.integers(3, 30))
        ori = float(rng.uniform(4, 24))
        comp = float(rng.uniform(0.5, ori))
        per_image = float(rng.uniform(1, 3)) * self.ds.train.bits.max() / 8
        budget = MemoryBudget.from_reference(ref, per_image, ori, comp)
        assert equivalent_capacity(budget) == math.floor(Fraction(ref) * Fraction(ori) / Fraction(comp))
        buf = self.build(budget)
        assert buf.total_bits <= 8 * budget.bytes
