"""Attack metrics: FAR-calibrated Type1, Rank-1 with self-exclusion, classifier
inversion accuracy, membership-inference accuracy, and snapshot-subset ablation.

Every metric reports exact counts (value = true_positives / trials) and is
deterministic given the trained attack artifacts. The acceptance threshold is
calibrated so the empirical false-accept rate on an impostor distance set
stays at or below the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ImageSample, stack_pixels
from .incorporation import VectorTuple, build_vector_bank, make_test_input
from .inversion import AttackConfig, Generator, PerceptualNet, invert_batch, train_inversion
from .membership import (MIConfig, MIDataset, build_mi_dataset, infer_membership_batch,
                         train_mi)
from .target_models import SnapshotSet, TargetModel

EvalRecord = tuple[ImageSample, VectorTuple]  # one probe image and its snapshot outputs


@dataclass(frozen=True)
class Threshold:
    """Acceptance distance calibrated to a false-accept-rate budget."""

    t: float
    far_target: float
    calibration_size: int
    empirical_far: float

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("threshold must be >= 0")
        if self.empirical_far > self.far_target + 1e-12:
            raise ValueError(f"empirical FAR {self.empirical_far} exceeds target {self.far_target}")


@dataclass
class EvalReport:
    """One metric value with exact counts and full experiment provenance."""

    metric: str
    value: float
    true_positives: int
    trials: int
    scenario: str = ""
    mode: str = ""
    models_for_test: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trials <= 0:
            raise ValueError("trials must be positive")
        if self.value != self.true_positives / self.trials:
            raise ValueError("value must equal true_positives / trials exactly")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("metric values lie in [0, 1]")

    @classmethod
    def from_counts(cls, metric: str, true_positives: int, trials: int, **kw) -> "EvalReport":
        return cls(metric=metric, value=true_positives / trials,
                   true_positives=true_positives, trials=trials, **kw)

    def to_dict(self) -> dict:
        d = {"metric": self.metric, "value": self.value,
             "true_positives": self.true_positives, "trials": self.trials,
             "scenario": self.scenario, "mode": self.mode,
             "models_for_test": self.models_for_test,
             "seed": "" if self.seed is None else self.seed}
        d.update({k: v for k, v in self.extra.items() if np.isscalar(v) or isinstance(v, str)})
        return d


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def calibration_impostor_distances(model: TargetModel, samples: list[ImageSample],
                                   max_pairs: int = 100_000, seed: int = 0) -> np.ndarray:
    """Distances of cross-class template pairs on the model's own training set.

    All cross-class pairs are formed and subsampled (seeded) to ``max_pairs``.
    """
    templates = model.query_batch(stack_pixels(samples))
    labels = np.array([s.class_label for s in samples])
    ii, jj = np.triu_indices(len(samples), k=1)
    cross = labels[ii] != labels[jj]
    ii, jj = ii[cross], jj[cross]
    if len(ii) == 0:
        raise ValueError("no cross-class pairs available for calibration")
    if len(ii) > max_pairs:
        keep = np.random.default_rng(seed).choice(len(ii), size=max_pairs, replace=False)
        ii, jj = ii[keep], jj[keep]
    return np.sqrt(np.sum((templates[ii] - templates[jj]) ** 2, axis=1))


def compute_far_threshold(impostor_distances: np.ndarray | list[float],
                          far_target: float = 0.01) -> Threshold:
    """Largest observed impostor distance whose acceptance keeps FAR <= target.

    With sorted distances s_1..s_N and k = floor(far_target * N), the
    threshold is s_k (acceptance rule d <= t); ties shrink k until the
    empirical FAR constraint holds, and k = 0 falls back to s_1 / 2.
    """
    s = np.sort(np.asarray(impostor_distances, dtype=float))
    n = len(s)
    if n == 0:
        raise ValueError("impostor distance list is empty")
    k = int(np.floor(far_target * n))
    while k >= 1 and np.searchsorted(s, s[k - 1], side="right") > far_target * n:
        k -= 1
    t = s[k - 1] if k >= 1 else s[0] / 2.0
    far = float(np.searchsorted(s, t, side="right")) / n
    return Threshold(t=float(t), far_target=far_target, calibration_size=n, empirical_far=far)


def _reconstruct(generator: Generator, records: list[EvalRecord], mode: str,
                 models_for_test: str) -> np.ndarray:
    """(N, H, W, C) reconstructions for the records' test-time inputs."""
    inputs = [make_test_input(tup, mode, models_for_test) for _, tup in records]
    if inputs and isinstance(inputs[0], list):
        # one forward per slot, outputs averaged per record
        flat = [aug for group in inputs for aug in group]
        per = len(inputs[0])
        images = invert_batch(generator, flat)
        return images.reshape(len(records), per, *images.shape[1:]).mean(axis=1)
    return invert_batch(generator, inputs)


def type1_accuracy(generator: Generator, target_final: TargetModel,
                   records: list[EvalRecord], threshold: Threshold, mode: str,
                   models_for_test: str = "final", **report_kw) -> EvalReport:
    """Fraction of reconstructions re-embedding within t of the leaked template."""
    if not records:
        raise ValueError("no evaluation records")
    recon = _reconstruct(generator, records, mode, models_for_test)
    re_embedded = target_final.query_batch(recon)
    originals = np.stack([tup.final for _, tup in records])
    d = np.sqrt(np.sum((originals - re_embedded) ** 2, axis=1))
    tp = int(np.sum(d <= threshold.t))
    return EvalReport.from_counts("type1", tp, len(records), mode=mode,
                                  models_for_test=models_for_test,
                                  extra={"threshold": threshold.t,
                                         "far_target": threshold.far_target,
                                         **report_kw.pop("extra", {})}, **report_kw)


def rank1_accuracy(generator: Generator, target_final: TargetModel,
                   gallery: list[EvalRecord], mode: str,
                   models_for_test: str = "final", **report_kw) -> EvalReport:
    """Nearest-gallery-template classification, excluding the probe's own reading.

    Gallery entries whose class has no second sample cannot score and are
    skipped (counted in ``extra["skipped"]``); ties break to the smallest
    sample_id.
    """
    gallery = sorted(gallery, key=lambda r: r[0].sample_id)  # argmin tie-break order
    labels = np.array([img.class_label for img, _ in gallery])
    counts = {c: int(np.sum(labels == c)) for c in set(labels.tolist())}
    usable = [i for i in range(len(gallery)) if counts[int(labels[i])] >= 2]
    if not usable:
        raise ValueError("every gallery class is a singleton; rank-1 is undefined")

    templates = np.stack([tup.final for _, tup in gallery])
    probe_records = [gallery[i] for i in usable]
    recon = _reconstruct(generator, probe_records, mode, models_for_test)
    re_embedded = target_final.query_batch(recon)

    tp = 0
    for row, i in enumerate(usable):
        d = np.sqrt(np.sum((templates - re_embedded[row]) ** 2, axis=1))
        d[i] = np.inf  # self-exclusion by sample_id (gallery ids are unique)
        j = int(np.argmin(d))
        if labels[j] == labels[i]:
            tp += 1
    return EvalReport.from_counts("rank1", tp, len(usable), mode=mode,
                                  models_for_test=models_for_test,
                                  extra={"skipped": len(gallery) - len(usable),
                                         **report_kw.pop("extra", {})}, **report_kw)


def classifier_inversion_accuracy(generator: Generator, target_final: TargetModel,
                                  records: list[EvalRecord], mode: str,
                                  models_for_test: str = "final", **report_kw) -> EvalReport:
    """Fraction of reconstructions the classifier assigns to the original class."""
    if target_final.kind != "classifier":
        raise ValueError("classifier inversion accuracy needs a classifier target")
    if not records:
        raise ValueError("no evaluation records")
    recon = _reconstruct(generator, records, mode, models_for_test)
    probs = target_final.query_batch(recon)
    predicted = [target_final.class_labels[i] for i in probs.argmax(axis=1)]
    truth = [img.class_label for img, _ in records]
    tp = int(sum(p == t for p, t in zip(predicted, truth)))
    return EvalReport.from_counts("classifier_accuracy", tp, len(records), mode=mode,
                                  models_for_test=models_for_test, **report_kw)


def mi_accuracy(attacker, dataset: MIDataset, **report_kw) -> EvalReport:
    """Fraction of correct thresholded membership decisions over the dataset."""
    scores = infer_membership_batch(attacker, dataset.inputs)
    decisions = scores >= 0.5
    tp = int(np.sum(decisions == dataset.members))
    return EvalReport.from_counts("mi_accuracy", tp, len(dataset),
                                  mode=dataset.mode, **report_kw)


def snapshot_ablation(snapshots: SnapshotSet, subsets: list[list[int]], attack_kind: str,
                      *,
                      probe_train: list[ImageSample] | None = None,
                      eval_records: list[EvalRecord] | None = None,
                      threshold: Threshold | None = None,
                      attack_config: AttackConfig | None = None,
                      perceptual_net: PerceptualNet | None = None,
                      member_train: list[ImageSample] | None = None,
                      nonmember_train: list[ImageSample] | None = None,
                      member_eval: list[ImageSample] | None = None,
                      nonmember_eval: list[ImageSample] | None = None,
                      mi_config: MIConfig | None = None,
                      seed: int = 0) -> list[EvalReport]:
    """Retrain the attack on each snapshot subset, always evaluating against the
    final model of the full set. Incorporation is ``rand`` throughout, so the
    attack input width stays m regardless of the subset size.

    ``attack_kind="inversion"`` trains a generator per subset and reports Type1
    on ``eval_records``; ``attack_kind="mi"`` trains a membership attacker per
    subset and reports accuracy on an evaluation set queried from the final
    model only.
    """
    reports = []
    for subset in subsets:
        sub = snapshots.subset(subset)  # raises on empty subsets
        extra = {"subset": "+".join(str(i) for i in subset)}
        if attack_kind == "inversion":
            if None in (probe_train, eval_records, threshold, attack_config):
                raise ValueError("inversion ablation needs probe_train, eval_records, "
                                 "threshold and attack_config")
            bank = build_vector_bank(sub, probe_train)
            gen = train_inversion(bank, probe_train, "rand", attack_config, perceptual_net)
            rep = type1_accuracy(gen, snapshots.final, eval_records, threshold, "rand",
                                 "final", scenario=snapshots.scenario, seed=seed, extra=extra)
        elif attack_kind == "mi":
            if None in (member_train, nonmember_train, member_eval, nonmember_eval, mi_config):
                raise ValueError("mi ablation needs member/nonmember train and eval images "
                                 "and mi_config")
            rng = np.random.default_rng(seed)
            train_set = build_mi_dataset(sub, member_train, nonmember_train, "rand", rng)
            attacker = train_mi(train_set, "rand", mi_config)
            final_only = snapshots.subset([snapshots.alpha - 1])
            eval_set = build_mi_dataset(final_only, member_eval, nonmember_eval, "rand", rng)
            rep = mi_accuracy(attacker, eval_set, scenario=snapshots.scenario, seed=seed,
                              extra=extra)
        else:
            raise ValueError(f"unknown attack kind {attack_kind!r}")
        reports.append(rep)
    return reports
