"""Inversion GAN training behavior: determinism, learnability, persistence."""

import numpy as np
import pytest

from snapleak.dataset import split_feature_extraction
from snapleak.incorporation import build_vector_bank, make_test_input
from snapleak.inversion import (AttackConfig, InversionDiverged, invert, load_generator,
                                save_generator, train_inversion, train_perceptual_net)
from snapleak.target_models import TrainConfig, train_with_snapshots
from snapleak.toydata import make_texture_corpus

SMALL_ATTACK = AttackConfig(epochs=4, batch_size=16, z_dim=32, dec_channels=(24, 12, 8, 8),
                            disc_widths=(8, 12, 16), seed=0)


@pytest.fixture(scope="module")
def setup():
    corpus = make_texture_corpus(n_classes=8, n_per_class=8, size=32, seed=30)
    split = split_feature_extraction(corpus, probe_class_count=3, probe_size=20, seed=0)
    cfg = TrainConfig(epochs=6, batch_size=16, embedding_dim=16, hidden_dim=32,
                      conv_widths=(8, 12, 16), seed=0)
    snapshots = train_with_snapshots(split, cfg, [0.0, 0.25, 0.5, 0.75, 1.0])
    bank = build_vector_bank(snapshots, split.probe)
    perceptual = train_perceptual_net(
        np.stack([s.pixels for s in split.target_train]),
        np.array([s.class_label for s in split.target_train]), seed=1, epochs=2)
    return split, snapshots, bank, perceptual


class TestTrainInversion:
    def test_rand_alpha1_reduces_to_single_model(self, setup):
        split, snapshots, bank, perceptual = setup
        single = [t.__class__(t.sample_id, t.class_label, t.vectors[-1:]) for t in bank]
        gen = train_inversion(single, split.probe, "rand", SMALL_ATTACK, perceptual)
        assert gen.input_dim == bank[0].m
        assert gen.align_head is None

    def test_concat_input_width(self, setup):
        split, snapshots, bank, perceptual = setup
        gen = train_inversion(bank, split.probe, "concat", SMALL_ATTACK, perceptual)
        assert gen.input_dim == bank[0].alpha * bank[0].m

    def test_training_curve_logged(self, setup):
        split, snapshots, bank, perceptual = setup
        gen = train_inversion(bank, split.probe, "rand", SMALL_ATTACK, perceptual)
        assert len(gen.training_curve) == SMALL_ATTACK.epochs
        row = gen.training_curve[0]
        assert {"epoch", "l1", "ssim", "perceptual", "adversarial", "alignment",
                "total", "d_loss"} <= set(row)
        assert abs(row["total"] - (row["l1"] + row["ssim"] + row["perceptual"]
                                   + row["adversarial"] + row["alignment"])) < 1e-9

    def test_fixed_seed_reproduces_loss_curve_bitwise(self, setup):
        split, snapshots, bank, perceptual = setup
        a = train_inversion(bank, split.probe, "srwal", SMALL_ATTACK, perceptual)
        b = train_inversion(bank, split.probe, "srwal", SMALL_ATTACK, perceptual)
        assert a.training_curve == b.training_curve  # float-exact equality
        sa, sb = a.state_dict(), b.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_mismatched_probe_rejected(self, setup):
        split, snapshots, bank, perceptual = setup
        with pytest.raises(ValueError, match="missing sample"):
            train_inversion(bank, split.probe[:3], "rand", SMALL_ATTACK, perceptual)

    def test_nan_aborts_with_diagnostics(self, setup, monkeypatch):
        split, snapshots, bank, perceptual = setup
        import snapleak.inversion as inv
        monkeypatch.setattr(inv, "generator_adversarial_loss", lambda d: float("nan"))
        with pytest.raises(InversionDiverged) as err:
            train_inversion(bank, split.probe, "rand", SMALL_ATTACK, perceptual)
        assert "adversarial" in err.value.components


class TestInvert:
    def test_deterministic_and_bounded(self, setup):
        split, snapshots, bank, perceptual = setup
        gen = train_inversion(bank, split.probe, "srwal", SMALL_ATTACK, perceptual)
        aug = make_test_input(bank[0], "srwal", "final")
        img1, img2 = invert(gen, aug), invert(gen, aug)
        assert np.array_equal(img1, img2)
        assert img1.shape == gen.image_shape
        assert img1.min() >= 0.0 and img1.max() <= 1.0

    def test_width_mismatch_rejected(self, setup):
        split, snapshots, bank, perceptual = setup
        gen = train_inversion(bank, split.probe, "rand", SMALL_ATTACK, perceptual)
        with pytest.raises(ValueError, match="width"):
            invert(gen, make_test_input(bank[0], "srwal", "final"))


class TestAlignmentHeadLearnability:
    def test_heldout_index_accuracy(self, setup):
        # the slot index is deducible from the nonzero block, so a short run suffices
        split, snapshots, bank, perceptual = setup
        cfg = AttackConfig(epochs=12, batch_size=16, z_dim=32, dec_channels=(24, 12, 8, 8),
                           disc_widths=(8, 12, 16), seed=1)
        gen = train_inversion(bank, split.probe, "srwal", cfg, perceptual)
        rng = np.random.default_rng(99)
        hits, trials = 0, 0
        from snapleak.incorporation import make_structured_random
        for tup in bank:
            for _ in range(3):
                aug = make_structured_random(tup, rng, with_label=True)
                _, logits = gen.forward(aug.data[None], train=False)
                hits += int(logits[0].argmax() + 1 == aug.slot_index)
                trials += 1
        assert hits / trials >= 0.95


class TestGeneratorPersistence:
    def test_roundtrip_bit_exact(self, setup, tmp_path):
        split, snapshots, bank, perceptual = setup
        gen = train_inversion(bank, split.probe, "srwal", SMALL_ATTACK, perceptual)
        save_generator(gen, tmp_path / "gen")
        loaded = load_generator(tmp_path / "gen")
        aug = make_test_input(bank[0], "srwal", "final")
        assert np.array_equal(invert(gen, aug), invert(loaded, aug))
        assert loaded.mode == "srwal" and loaded.alpha == gen.alpha
        assert len(loaded.training_curve) == len(gen.training_curve)
