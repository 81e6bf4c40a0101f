"""End-to-end experiment orchestration and report rendering.

One :class:`ExperimentConfig` fully determines a run: corpus, split regime,
leakage scenario, incorporation mode, attack sizes and every sub-config. Runs
execute stage by stage (dataset -> target -> bank -> attack -> evaluate) into
a content-addressed directory ``runs/<config-hash>/``, persisting every
intermediate artifact; identical config and seed reproduce the report files
byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataset import (DatasetSplit, ImageSample, blur_sample, load_corpus,
                      split_classification, split_feature_extraction)
from .evaluation import (EvalReport, Threshold, calibration_impostor_distances,
                         classifier_inversion_accuracy, compute_far_threshold, mi_accuracy,
                         rank1_accuracy, type1_accuracy)
from .incorporation import VectorTuple, build_vector_bank, save_bank
from .inversion import (AttackConfig, Generator, PerceptualNet, save_generator,
                        train_inversion, train_perceptual_net)
from .membership import MIConfig, build_mi_dataset, save_mi_attacker, save_mi_dataset, train_mi
from .target_models import (SnapshotSet, TargetModel, TrainConfig, init_target_model,
                            run_downslope_scenario, run_update_scenario, save_snapshot_set,
                            train_with_snapshots, _fit)
from .toydata import make_texture_corpus

STAGES = ("dataset", "target", "bank", "attack", "evaluate")


class StageFailure(Exception):
    """A pipeline stage failed; earlier artifacts stay on disk."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class SyntheticSpec:
    n_classes: int = 24
    n_per_class: int = 30
    size: int = 32
    channels: int = 1
    noise: float = 0.04
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment."""

    name: str = "toy"
    seed: int = 0
    # corpus
    data_kind: str = "synthetic"            # synthetic | manifest
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    manifest_path: str | None = None
    descriptor_path: str | None = None
    # split
    regime: str = "feature_extraction"      # feature_extraction | classification
    probe_class_count: int = 8
    probe_size: int = 240
    holdout_fraction: float = 0.15
    # scenario / snapshots
    scenario: str = "upslope"               # upslope | update | downslope
    schedule: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    pretrain_epochs: int = 0                # generic warm start for the stage-0 snapshot
    pretrain_classes: int = 12
    removed_class_count: int = 2            # downslope
    update_images: int = 12                 # update
    # attack
    attacks: tuple[str, ...] = ("inversion",)
    mode: str = "rand"
    models_for_test: str = "final"
    ell: int = 180                          # attack training-set size
    eval_size: int = 60
    far_target: float = 0.01
    mi_members: int = 100                   # per side, MI training
    mi_eval_members: int = 50               # per side, MI evaluation
    # sub-configs
    target: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    mi: MIConfig = field(default_factory=MIConfig)

    def __post_init__(self):
        if self.regime not in ("feature_extraction", "classification"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.scenario not in ("upslope", "update", "downslope"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.mode not in ("rand", "concat", "sr", "srwal"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.models_for_test not in ("final", "all"):
            raise ValueError("models_for_test must be 'final' or 'all'")
        bad = set(self.attacks) - {"inversion", "mi"}
        if bad:
            raise ValueError(f"unknown attacks {sorted(bad)}")

    def to_dict(self) -> dict:
        return {
            "name": self.name, "seed": self.seed, "data_kind": self.data_kind,
            "synthetic": self.synthetic.to_dict(), "manifest_path": self.manifest_path,
            "descriptor_path": self.descriptor_path, "regime": self.regime,
            "probe_class_count": self.probe_class_count, "probe_size": self.probe_size,
            "holdout_fraction": self.holdout_fraction, "scenario": self.scenario,
            "schedule": list(self.schedule), "pretrain_epochs": self.pretrain_epochs,
            "pretrain_classes": self.pretrain_classes,
            "removed_class_count": self.removed_class_count,
            "update_images": self.update_images, "attacks": list(self.attacks),
            "mode": self.mode, "models_for_test": self.models_for_test, "ell": self.ell,
            "eval_size": self.eval_size, "far_target": self.far_target,
            "mi_members": self.mi_members, "mi_eval_members": self.mi_eval_members,
            "target": self.target.to_dict(), "attack": self.attack.to_dict(),
            "mi": self.mi.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["synthetic"] = SyntheticSpec.from_dict(d.get("synthetic", {}))
        d["schedule"] = tuple(d.get("schedule", (0.0, 0.25, 0.5, 0.75, 1.0)))
        d["attacks"] = tuple(d.get("attacks", ("inversion",)))
        d["target"] = TrainConfig.from_dict(d.get("target", {}))
        d["attack"] = AttackConfig.from_dict(d.get("attack", {}))
        d["mi"] = MIConfig.from_dict(d.get("mi", {}))
        return cls(**d)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _stage_dataset(config: ExperimentConfig) -> tuple[list[ImageSample], DatasetSplit]:
    if config.data_kind == "synthetic":
        spec = config.synthetic
        corpus = make_texture_corpus(spec.n_classes, spec.n_per_class, spec.size,
                                     spec.channels, noise=spec.noise, seed=spec.seed)
    elif config.data_kind == "manifest":
        if not config.manifest_path:
            raise ValueError("manifest_path is required for data_kind='manifest'")
        corpus = load_corpus(config.manifest_path, config.descriptor_path)
    else:
        raise ValueError(f"unknown data_kind {config.data_kind!r}")
    if config.regime == "feature_extraction":
        split = split_feature_extraction(corpus, config.probe_class_count,
                                         config.probe_size, seed=config.seed)
    else:
        split = split_classification(corpus, config.holdout_fraction, seed=config.seed)
    return corpus, split


def _pretrained_init(config: ExperimentConfig, split: DatasetSplit) -> TargetModel | None:
    """Generic warm start: briefly train the backbone on a disjoint synthetic task."""
    if config.pretrain_epochs <= 0:
        return None
    image_shape = split.target_train[0].pixels.shape
    generic = make_texture_corpus(config.pretrain_classes,
                                  max(6, config.target.batch_size // 2),
                                  size=image_shape[0], channels=image_shape[2],
                                  seed=config.seed + 90_000, id_prefix="generic")
    labels = sorted({s.class_label for s in generic})
    kind = "feature_extractor" if config.regime == "feature_extraction" else "classifier"
    rng = np.random.default_rng(config.target.seed)
    model = init_target_model(kind, image_shape, labels, config.target, rng)
    _fit(model, generic, config.target, config.pretrain_epochs, {}, rng, "pretrain")
    return model


def _craft_update_class(config: ExperimentConfig, split: DatasetSplit,
                        probe_rest: list[ImageSample]) -> list[ImageSample]:
    """Blurred images of one fresh class for the update scenario."""
    new_label = max(s.class_label for s in split.target_train + split.probe) + 1
    if config.data_kind == "synthetic":
        fresh = make_texture_corpus(1, config.update_images,
                                    size=config.synthetic.size,
                                    channels=config.synthetic.channels,
                                    noise=config.synthetic.noise,
                                    seed=config.seed + 70_000, id_prefix="newuser")
        return [blur_sample(s, new_class_label=new_label) for s in fresh]
    pool = probe_rest[-config.update_images:]
    if len(pool) < config.update_images:
        raise ValueError("not enough spare probe images to craft the update class")
    return [blur_sample(s, new_class_label=new_label) for s in pool]


def _stage_target(config: ExperimentConfig, split: DatasetSplit,
                  probe_rest: list[ImageSample]) -> SnapshotSet:
    initial = _pretrained_init(config, split)
    if config.scenario == "upslope":
        return train_with_snapshots(split, config.target, list(config.schedule), initial=initial)
    if config.scenario == "downslope":
        return run_downslope_scenario(split, config.removed_class_count, config.target,
                                      list(config.schedule), initial=initial)
    base = train_with_snapshots(split, config.target, [1.0], initial=initial)
    crafted = _craft_update_class(config, split, probe_rest)
    return run_update_scenario(base, split, crafted, config.target)


def _split_probe(probe: list[ImageSample], ell: int, eval_size: int,
                 seed: int) -> tuple[list[ImageSample], list[ImageSample], list[ImageSample]]:
    """Stratified (per-class, seeded) partition into attack-train / eval / rest."""
    if ell + eval_size > len(probe):
        raise ValueError(f"probe has {len(probe)} images; cannot take ell={ell} "
                         f"plus eval_size={eval_size}")
    rng = np.random.default_rng(seed + 1)
    groups: dict[int, list[ImageSample]] = {}
    for s in sorted(probe, key=lambda s: s.sample_id):
        groups.setdefault(s.class_label, []).append(s)
    queues = []
    for c in sorted(groups):
        members = groups[c]
        order = rng.permutation(len(members))
        queues.append([members[i] for i in order])
    interleaved: list[ImageSample] = []
    while any(queues):
        for q in queues:
            if q:
                interleaved.append(q.pop(0))
    return interleaved[:ell], interleaved[ell:ell + eval_size], interleaved[ell + eval_size:]


def _mi_images(config: ExperimentConfig, split: DatasetSplit) \
        -> tuple[list[ImageSample], list[ImageSample], list[ImageSample], list[ImageSample]]:
    """Disjoint member/nonmember image groups for MI training and evaluation."""
    rng = np.random.default_rng(config.seed + 2)
    train_sorted = sorted(split.target_train, key=lambda s: s.sample_id)
    probe_sorted = sorted(split.probe, key=lambda s: s.sample_id)
    need = config.mi_members + config.mi_eval_members
    if len(train_sorted) < need or len(probe_sorted) < need:
        raise ValueError(f"MI needs {need} member and nonmember images; have "
                         f"{len(train_sorted)} / {len(probe_sorted)}")
    mem = [train_sorted[i] for i in rng.permutation(len(train_sorted))[:need]]
    non = [probe_sorted[i] for i in rng.permutation(len(probe_sorted))[:need]]
    k = config.mi_members
    return mem[:k], non[:k], mem[k:], non[k:]


# ---------------------------------------------------------------------------
# run driver
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    reports: list[EvalReport]
    snapshots: SnapshotSet | None = None
    generator: Generator | None = None
    threshold: Threshold | None = None


def run_experiment(config: ExperimentConfig, runs_root: str | Path = "runs",
                   until: str = "evaluate") -> RunResult:
    """Execute the pipeline into ``runs_root/<config-hash>/`` up to ``until``."""
    if until not in STAGES:
        raise ValueError(f"until must be one of {STAGES}")
    run_dir = Path(runs_root) / config.config_hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    last = STAGES.index(until)
    stage = "dataset"
    try:
        corpus, split = _stage_dataset(config)
        d = run_dir / "dataset"
        d.mkdir(exist_ok=True)
        with open(d / "split.json", "w") as fh:
            json.dump({"regime": split.regime,
                       "train_ids": [s.sample_id for s in split.target_train],
                       "probe_ids": [s.sample_id for s in split.probe],
                       "excluded": split.excluded}, fh, indent=2)
        if last < 1:
            return RunResult(run_dir, [])

        stage = "target"
        attack_train, eval_images, probe_rest = _split_probe(
            split.probe, config.ell, config.eval_size, config.seed)
        snapshots = _stage_target(config, split, probe_rest)
        save_snapshot_set(snapshots, run_dir / "target" / "snapshots")
        if last < 2:
            return RunResult(run_dir, [], snapshots)

        stage = "bank"
        bank_train = build_vector_bank(snapshots, attack_train)
        bank_eval = build_vector_bank(snapshots, eval_images)
        b = run_dir / "bank"
        b.mkdir(exist_ok=True)
        save_bank(bank_train, b / "train.npz")
        save_bank(bank_eval, b / "eval.npz")
        if last < 3:
            return RunResult(run_dir, [], snapshots)

        stage = "attack"
        generator = None
        perceptual = None
        mi_attackers: dict[str, tuple] = {}
        a = run_dir / "attack"
        a.mkdir(exist_ok=True)
        if "inversion" in config.attacks:
            perceptual = train_perceptual_net(
                np.stack([s.pixels for s in split.target_train]),
                np.array([s.class_label for s in split.target_train]),
                seed=config.seed + 3)
            generator = train_inversion(bank_train, attack_train, config.mode,
                                        config.attack, perceptual)
            save_generator(generator, a / "generator")
        if "mi" in config.attacks:
            mem_tr, non_tr, mem_ev, non_ev = _mi_images(config, split)
            rng = np.random.default_rng(config.seed + 4)
            mi_train = build_mi_dataset(snapshots, mem_tr, non_tr, config.mode, rng)
            mi_eval = build_mi_dataset(snapshots, mem_ev, non_ev, config.mode, rng)
            attacker = train_mi(mi_train, config.mode, config.mi)
            save_mi_dataset(mi_train, a / "mi_train.npz")
            save_mi_dataset(mi_eval, a / "mi_eval.npz")
            save_mi_attacker(attacker, a / "mi_attacker")
            mi_attackers["mi"] = (attacker, mi_eval)
        if last < 4:
            return RunResult(run_dir, [], snapshots, generator)

        stage = "evaluate"
        reports: list[EvalReport] = []
        threshold = None
        common = {"scenario": config.scenario, "seed": config.seed,
                  "extra": {"config_hash": config.config_hash(), "name": config.name}}
        if generator is not None:
            eval_records = list(zip(eval_images, bank_eval))
            if snapshots.final.kind == "feature_extractor":
                impostors = calibration_impostor_distances(
                    snapshots.final, split.target_train, seed=config.seed)
                threshold = compute_far_threshold(impostors, config.far_target)
                reports.append(type1_accuracy(generator, snapshots.final, eval_records,
                                              threshold, config.mode, config.models_for_test,
                                              **_copy(common)))
                reports.append(rank1_accuracy(generator, snapshots.final, eval_records,
                                              config.mode, config.models_for_test,
                                              **_copy(common)))
            else:
                reports.append(classifier_inversion_accuracy(
                    generator, snapshots.final, eval_records, config.mode,
                    config.models_for_test, **_copy(common)))
        if "mi" in mi_attackers:
            attacker, mi_eval = mi_attackers["mi"]
            rep = mi_accuracy(attacker, mi_eval, **_copy(common))
            rep.extra["validation_accuracy"] = attacker.validation_accuracy
            reports.append(rep)

        e = run_dir / "evaluation"
        e.mkdir(exist_ok=True)
        write_reports_csv(reports, e / "reports.csv")
        write_reports_text(reports, e / "reports.txt")
        return RunResult(run_dir, reports, snapshots, generator, threshold)
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(stage, exc) from exc


def _copy(common: dict) -> dict:
    out = dict(common)
    out["extra"] = dict(common["extra"])
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ["metric", "value", "true_positives", "trials", "scenario", "mode",
                  "models_for_test", "seed", "config_hash", "name"]


def write_reports_csv(reports: list[EvalReport], path: str | Path) -> Path:
    rows = [r.to_dict() for r in reports]
    extra_cols = sorted({k for row in rows for k in row} - set(REPORT_COLUMNS))
    cols = REPORT_COLUMNS + extra_cols
    rows.sort(key=lambda r: (r["metric"], str(r.get("mode", "")), str(r.get("subset", ""))))
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in cols})
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_reports_text(reports: list[EvalReport], path: str | Path) -> Path:
    lines = [f"{'metric':<22} {'value':>8} {'tp/trials':>12} {'scenario':<10} "
             f"{'mode':<7} {'test':<6}"]
    for r in sorted(reports, key=lambda r: r.metric):
        lines.append(f"{r.metric:<22} {r.value:>8.4f} "
                     f"{f'{r.true_positives}/{r.trials}':>12} {r.scenario:<10} "
                     f"{r.mode:<7} {r.models_for_test:<6}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_reports_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def render_report(run_dirs: list[str | Path], out_dir: str | Path) -> Path:
    """Merge several runs' report CSVs into one comparison table plus bar charts.

    Values are copied verbatim from the per-run files; nothing is recomputed.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged: list[dict] = []
    for rd in run_dirs:
        rd = Path(rd)
        csv_path = rd / "evaluation" / "reports.csv"
        if not csv_path.exists():
            raise FileNotFoundError(f"no report found under {rd} (expected {csv_path})")
        for row in read_reports_csv(csv_path):
            row["run"] = rd.name
            merged.append(row)
    if not merged:
        raise ValueError("no report rows found")
    metrics = sorted({row["metric"] for row in merged})
    runs = sorted({row["run"] for row in merged})
    per_run_metrics = {r: {row["metric"] for row in merged if row["run"] == r} for r in runs}
    if len(runs) > 1 and not set.intersection(*per_run_metrics.values()):
        raise ValueError(f"runs share no common metric: "
                         f"{ {r: sorted(m) for r, m in per_run_metrics.items()} }")

    cols = ["run"] + [c for c in merged[0] if c != "run"]
    cols += [c for row in merged for c in row if c not in cols]
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in sorted(merged, key=lambda r: (r["metric"], r["run"])):
            writer.writerow(row)

    lines = [f"{'run':<14} {'metric':<22} {'mode':<7} {'value':>8}"]
    for row in sorted(merged, key=lambda r: (r["metric"], r["run"])):
        lines.append(f"{row['run']:<14} {row['metric']:<22} {row.get('mode', ''):<7} "
                     f"{float(row['value']):>8.4f}")
    (out_dir / "comparison.txt").write_text("\n".join(lines) + "\n")

    for metric in metrics:
        rows = [r for r in merged if r["metric"] == metric]
        names = [f"{r['run'][:8]}\n{r.get('mode', '')}" for r in rows]
        values = [float(r["value"]) for r in rows]
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 3.2))
        ax.bar(range(len(rows)), values, color="#4878cf")
        ax.set_xticks(range(len(rows)), names, fontsize=7)
        ax.set_ylim(0, 1)
        ax.set_ylabel(metric)
        ax.set_title(metric)
        fig.tight_layout()
        fig.savefig(out_dir / f"{metric}.png", dpi=120)
        plt.close(fig)
    return out_dir
