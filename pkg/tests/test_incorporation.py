"""Incorporation-method constructions and their distributional properties."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from snapleak.incorporation import (AugmentedVector, VectorTuple, build_vector_bank, load_bank,
                                    make_concat, make_rand, make_structured_random,
                                    make_test_input, save_bank)


def _tuple(alpha=5, m=4, seed=0, sample_id="s0", label=1):
    rng = np.random.default_rng(seed)
    return VectorTuple(sample_id, label, rng.normal(size=(alpha, m)))


class TestMakeRand:
    def test_alpha_one_always_first(self):
        tup = _tuple(alpha=1)
        rng = np.random.default_rng(0)
        for _ in range(5):
            aug = make_rand(tup, rng)
            assert aug.slot_index == 1
            np.testing.assert_array_equal(aug.data, tup.vectors[0])

    def test_slot_frequencies_binomial(self):
        # binomial oracle: n=10000 draws, p=1/5 -> mean 2000, sigma = sqrt(n p (1-p)) = 40
        tup = _tuple(alpha=5)
        rng = np.random.default_rng(1)
        draws = np.array([make_rand(tup, rng).slot_index for _ in range(10_000)])
        sigma = np.sqrt(10_000 * 0.2 * 0.8)
        for slot in range(1, 6):
            count = int(np.sum(draws == slot))
            assert abs(count - 2000) <= 3 * sigma + 30  # 3-sigma band (spec: 2000 +- 150)

    def test_fixed_seed_reproducible(self):
        tup = _tuple()
        rng1, rng2 = np.random.default_rng(7), np.random.default_rng(7)
        assert [make_rand(tup, rng1).slot_index for _ in range(20)] == \
               [make_rand(tup, rng2).slot_index for _ in range(20)]


class TestMakeConcat:
    def test_definition(self):
        tup = VectorTuple("s", 0, np.array([[1.0, 2, 3], [4, 5, 6]]))
        aug = make_concat(tup)
        np.testing.assert_array_equal(aug.data, [1, 2, 3, 4, 5, 6])
        assert aug.slot_index is None and aug.mode == "concat"

    def test_alpha_one(self):
        tup = _tuple(alpha=1, m=6)
        np.testing.assert_array_equal(make_concat(tup).data, tup.vectors[0])

    def test_slot_extraction_inverts_concat(self):
        tup = _tuple(alpha=4, m=5)
        aug = make_concat(tup)
        for i in range(1, 5):
            np.testing.assert_array_equal(aug.slot(i), tup.vectors[i - 1])


class TestStructuredRandom:
    def test_definition(self):
        tup = VectorTuple("s", 0, np.array([[1.0, 2], [7, 9], [3, 4]]))
        rng = np.random.default_rng(0)
        aug = None
        while aug is None or aug.slot_index != 2:
            aug = make_structured_random(tup, rng)
        np.testing.assert_array_equal(aug.data, [0, 0, 7, 9, 0, 0])

    def test_zero_outside_slot_is_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            tup = _tuple(alpha=5, m=8, seed=rng.integers(1000))
            aug = make_structured_random(tup, rng, with_label=True)
            outside = np.abs(aug.data).sum() - np.abs(aug.slot(aug.slot_index)).sum()
            assert outside == 0.0

    def test_slot_frequencies_binomial(self):
        tup = _tuple(alpha=5)
        rng = np.random.default_rng(3)
        draws = np.array([make_structured_random(tup, rng).slot_index
                          for _ in range(10_000)])
        for slot in range(1, 6):
            assert abs(int(np.sum(draws == slot)) - 2000) <= 150

    def test_chi_square_uniformity(self):
        # the full 1e5-draw check lives in the acceptance suite
        tup = _tuple(alpha=5)
        rng = np.random.default_rng(4)
        constructed = np.array([make_structured_random(tup, rng).slot_index
                                for _ in range(20_000)])
        counts = np.bincount(constructed, minlength=6)[1:]
        assert stats.chisquare(counts).pvalue > 0.001

    def test_mode_label(self):
        tup = _tuple()
        rng = np.random.default_rng(5)
        assert make_structured_random(tup, rng, with_label=False).mode == "sr"
        assert make_structured_random(tup, rng, with_label=True).mode == "srwal"


class TestMakeTestInput:
    def test_srwal_final_slot_alpha(self):
        vecs = np.zeros((5, 2))
        vecs[4] = [1.0, 1.0]
        tup = VectorTuple("s", 0, vecs)
        aug = make_test_input(tup, "srwal", "final")
        np.testing.assert_array_equal(aug.data, [0, 0, 0, 0, 0, 0, 0, 0, 1, 1])
        assert aug.slot_index == 5

    def test_concat_all_identical_to_make_concat(self):
        tup = _tuple(alpha=3, m=4)
        np.testing.assert_array_equal(make_test_input(tup, "concat", "all").data,
                                      make_concat(tup).data)

    def test_rand_final_passthrough(self):
        tup = _tuple(alpha=4, m=6)
        aug = make_test_input(tup, "rand", "final")
        np.testing.assert_array_equal(aug.data, tup.final)

    def test_lone_vector_needs_alpha(self):
        y = np.ones(4)
        with pytest.raises(ValueError, match="alpha"):
            make_test_input(y, "sr", "final")
        aug = make_test_input(y, "sr", "final", alpha=3)
        assert aug.slot_index == 3
        np.testing.assert_array_equal(aug.data[8:], y)

    def test_all_mode_needs_tuple(self):
        with pytest.raises(ValueError, match="VectorTuple"):
            make_test_input(np.ones(4), "sr", "all", alpha=3)

    def test_sr_all_returns_one_input_per_slot(self):
        tup = _tuple(alpha=3, m=4)
        augs = make_test_input(tup, "sr", "all")
        assert isinstance(augs, list) and len(augs) == 3
        for i, aug in enumerate(augs, start=1):
            assert aug.slot_index == i
            np.testing.assert_array_equal(aug.slot(i), tup.vectors[i - 1])


class TestAugmentedVectorInvariants:
    def test_sr_rejects_nonzero_outside_slot(self):
        data = np.ones(6)
        with pytest.raises(ValueError, match="zero outside"):
            AugmentedVector(data, "sr", alpha=3, m=2, slot_index=1)

    def test_concat_rejects_slot(self):
        with pytest.raises(ValueError, match="no slot"):
            AugmentedVector(np.ones(6), "concat", alpha=3, m=2, slot_index=1)

    @given(alpha=st.integers(1, 6), m=st.integers(1, 8), seed=st.integers(0, 99))
    @settings(max_examples=30, deadline=None)
    def test_sr_nonzero_slot_count_at_most_one(self, alpha, m, seed):
        rng = np.random.default_rng(seed)
        tup = VectorTuple("s", 0, rng.normal(size=(alpha, m)))
        aug = make_structured_random(tup, rng)
        nonzero_slots = sum(1 for i in range(1, alpha + 1)
                            if np.abs(aug.slot(i)).sum() > 0)
        assert nonzero_slots <= 1


class TestBank:
    def test_bank_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        bank = [VectorTuple(f"s{i}", i % 3, rng.normal(size=(4, 5))) for i in range(7)]
        path = save_bank(bank, tmp_path / "bank.npz")
        loaded = load_bank(path)
        assert [t.sample_id for t in loaded] == [t.sample_id for t in bank]
        assert [t.class_label for t in loaded] == [t.class_label for t in bank]
        for a, b in zip(loaded, bank):
            np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_empty_probe_rejected(self):
        # the probe check fires before any snapshot is touched
        with pytest.raises(ValueError, match="empty"):
            build_vector_bank(object(), [])
