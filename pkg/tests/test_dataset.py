"""Corpus ingestion, split regimes and the crafted-blur transform."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from snapleak.dataset import (DatasetDescriptor, DatasetSplit, ImageSample, IngestError,
                              blur_sample, gaussian_blur, gaussian_kernel2d, load_corpus,
                              split_classification, split_feature_extraction)
from snapleak.toydata import make_texture_corpus, write_corpus


# --- independent blur oracle -------------------------------------------------

def oracle_kernel(sigma=0.8):
    """Direct evaluation of exp(-(dx^2+dy^2)/(2 sigma^2)) over {-1,0,1}^2."""
    k = np.zeros((3, 3))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            k[dy + 1, dx + 1] = np.exp(-(dx ** 2 + dy ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def oracle_blur(img, kernel):
    """Scalar-loop convolution with edge-inclusive reflection padding, no clamping."""
    h, w, c = img.shape
    half = kernel.shape[0] // 2
    padded = np.pad(img, ((half, half), (half, half), (0, 0)), mode="symmetric")
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = 0.0
                for dy in range(kernel.shape[0]):
                    for dx in range(kernel.shape[1]):
                        acc += kernel[dy, dx] * padded[y + dy, x + dx, ch]
                out[y, x, ch] = acc
    return out


class TestGaussianBlur:
    def test_kernel_matches_oracle_and_center_weight(self):
        k = gaussian_kernel2d(3, 0.8)
        np.testing.assert_allclose(k, oracle_kernel(0.8), atol=1e-12)
        assert abs(k[1, 1] - 0.2725) < 5e-4  # center weight for sigma=0.8
        assert abs(k.sum() - 1.0) < 1e-9

    def test_constant_image_unchanged(self):
        img = np.full((8, 8, 1), 0.43)
        np.testing.assert_allclose(gaussian_blur(img), img, atol=1e-12)

    def test_impulse_recovers_kernel(self):
        img = np.zeros((3, 3, 1))
        img[1, 1, 0] = 1.0
        out = gaussian_blur(img)
        np.testing.assert_allclose(out[:, :, 0], oracle_kernel(0.8), atol=1e-12)

    def test_matches_loop_oracle_on_random_image(self):
        rng = np.random.default_rng(0)
        img = rng.random((9, 7, 3))
        expected = np.clip(oracle_blur(img, oracle_kernel(0.8)), 0, 1)
        np.testing.assert_allclose(gaussian_blur(img), expected, atol=1e-12)

    def test_double_blur_differs_from_single(self):
        img = np.zeros((7, 7, 1))
        img[3, 3, 0] = 1.0
        once = oracle_blur(img, oracle_kernel(0.8))
        twice = oracle_blur(once, oracle_kernel(0.8))
        assert not np.allclose(gaussian_blur(gaussian_blur(img)), gaussian_blur(img))
        np.testing.assert_allclose(gaussian_blur(gaussian_blur(img)), np.clip(twice, 0, 1),
                                   atol=1e-12)

    @given(a=st.floats(0.1, 0.9), b=st.floats(0.1, 0.9), seed=st.integers(0, 100))
    @settings(max_examples=25, deadline=None)
    def test_blur_is_linear_before_clamping(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((6, 6, 1)) * 0.5
        y = rng.random((6, 6, 1)) * 0.5
        lhs = gaussian_blur(np.clip(a * x + b * y, 0, 1))
        rhs = a * gaussian_blur(x) + b * gaussian_blur(y)
        if (a * x + b * y).max() <= 1.0:  # stays in range, so no clamping anywhere
            np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_blur_sample_sets_origin(self):
        s = make_texture_corpus(1, 1, size=16, seed=3)[0]
        blurred = blur_sample(s, new_class_label=99)
        assert blurred.origin == "crafted_blur"
        assert blurred.class_label == 99
        assert blurred.pixels.shape == s.pixels.shape


# --- ingestion ---------------------------------------------------------------

@pytest.fixture
def corpus_dir(tmp_path):
    samples = make_texture_corpus(n_classes=2, n_per_class=3, size=16, seed=1)
    manifest = write_corpus(samples, tmp_path)
    return tmp_path, manifest


class TestLoadCorpus:
    def test_basic_manifest(self, corpus_dir):
        _, manifest = corpus_dir
        corpus = load_corpus(manifest)
        assert len(corpus) == 6
        assert {s.class_label for s in corpus} == {0, 1}
        assert [s.sample_id for s in corpus] == sorted(s.sample_id for s in corpus)
        assert all(s.pixels.shape == (16, 16, 1) for s in corpus)

    def test_crop_rule_controls_shape(self, tmp_path):
        arr = (np.random.default_rng(0).random((160, 140)) * 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(tmp_path / "img.png")
        (tmp_path / "manifest.txt").write_text("img.png 0\n")
        DatasetDescriptor(height=128, width=128, channels=1, crop="center").save(
            tmp_path / "descriptor.json")
        corpus = load_corpus(tmp_path / "manifest.txt")
        assert corpus[0].pixels.shape == (128, 128, 1)

    def test_missing_image_is_fatal_and_names_path(self, corpus_dir):
        tmp_path, manifest = corpus_dir
        manifest.write_text(manifest.read_text() + "nope.png 0\n")
        with pytest.raises(IngestError, match="nope.png"):
            load_corpus(manifest)

    def test_label_gap_warns(self, corpus_dir):
        tmp_path, manifest = corpus_dir
        lines = manifest.read_text().splitlines()
        patched = [line.rsplit(" ", 1)[0] + (" 5" if line.endswith(" 1") else " 0")
                   for line in lines]
        manifest.write_text("\n".join(patched) + "\n")
        with pytest.warns(UserWarning, match="gap"):
            load_corpus(manifest)

    def test_empty_manifest_warns_and_returns_empty(self, corpus_dir):
        tmp_path, manifest = corpus_dir
        manifest.write_text("")
        with pytest.warns(UserWarning, match="empty"):
            assert load_corpus(manifest) == []


# --- splits ------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_corpus():
    return make_texture_corpus(n_classes=10, n_per_class=8, size=16, seed=2)


class TestSplits:
    def test_feature_extraction_class_disjoint(self, toy_corpus):
        split = split_feature_extraction(toy_corpus, probe_class_count=4, probe_size=20, seed=0)
        assert split.regime == "feature_extraction"
        assert not set(split.probe_classes) & set(split.train_classes)
        assert len(split.probe) == 20
        assert len(split.train_classes) == 6

    def test_probe_size_unreachable(self, toy_corpus):
        with pytest.raises(ValueError, match="smaller probe_size"):
            split_feature_extraction(toy_corpus, probe_class_count=2, probe_size=100, seed=0)

    def test_all_classes_as_probe_rejected(self, toy_corpus):
        with pytest.raises(ValueError, match="no target_train"):
            split_feature_extraction(toy_corpus, probe_class_count=10, probe_size=10, seed=0)

    def test_classification_holdout_counts(self):
        corpus = make_texture_corpus(n_classes=3, n_per_class=20, size=16, seed=4)
        split = split_classification(corpus, holdout_fraction=0.15, seed=0)
        per_class_probe = {c: sum(1 for s in split.probe if s.class_label == c)
                           for c in range(3)}
        assert per_class_probe == {0: 3, 1: 3, 2: 3}  # ceil(0.15 * 20)
        per_class_train = {c: sum(1 for s in split.target_train if s.class_label == c)
                           for c in range(3)}
        assert per_class_train == {0: 17, 1: 17, 2: 17}

    def test_two_sample_class_half_fraction(self):
        corpus = make_texture_corpus(n_classes=2, n_per_class=2, size=16, seed=5)
        split = split_classification(corpus, holdout_fraction=0.5, seed=0)
        for c in (0, 1):
            assert sum(1 for s in split.probe if s.class_label == c) == 1
            assert sum(1 for s in split.target_train if s.class_label == c) == 1

    def test_singleton_class_excluded_and_reported(self):
        corpus = make_texture_corpus(n_classes=3, n_per_class=4, size=16, seed=6)
        corpus = [s for s in corpus if not (s.class_label == 2 and "i000" not in s.sample_id)]
        with pytest.warns(UserWarning, match="single sample"):
            split = split_classification(corpus, holdout_fraction=0.25, seed=0)
        assert len(split.excluded) == 1
        assert 2 not in {s.class_label for s in split.target_train + split.probe}

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_fe_split_class_disjoint_property(self, toy_corpus, seed):
        split = split_feature_extraction(toy_corpus, probe_class_count=3, probe_size=12,
                                         seed=seed)
        assert not set(split.probe_classes) & set(split.train_classes)

    def test_splits_reproducible_bit_exact(self, toy_corpus):
        a = split_feature_extraction(toy_corpus, 4, 20, seed=7)
        b = split_feature_extraction(toy_corpus, 4, 20, seed=7)
        assert [s.sample_id for s in a.probe] == [s.sample_id for s in b.probe]
        assert [s.sample_id for s in a.target_train] == [s.sample_id for s in b.target_train]
        c = split_classification(toy_corpus, 0.25, seed=7)
        d = split_classification(toy_corpus, 0.25, seed=7)
        assert [s.sample_id for s in c.probe] == [s.sample_id for s in d.probe]

    def test_split_invariants_enforced(self, toy_corpus):
        probe = [s for s in toy_corpus if s.class_label == 0]
        train = toy_corpus
        with pytest.raises(ValueError, match="class-disjoint"):
            DatasetSplit(target_train=train, probe=probe, regime="feature_extraction")
        with pytest.raises(ValueError, match="both lists"):
            DatasetSplit(target_train=train, probe=probe, regime="classification")


def test_image_sample_pixel_range_enforced():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ImageSample("x", 0, np.full((4, 4, 1), 1.5))
