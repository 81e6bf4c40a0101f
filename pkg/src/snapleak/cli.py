"""Command-line entry points for batch experiment runs.

Subcommands mirror the pipeline stages: ``ingest`` checks a corpus,
``train-target`` stops after snapshot capture, ``attack-invert`` /
``attack-mi`` train the respective attack, ``evaluate`` runs the full
pipeline, ``ablate`` sweeps snapshot subsets and ``report`` merges finished
runs into tables and plots. Exit code 0 means full success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset import load_corpus
from .harness import ExperimentConfig, render_report, run_experiment, write_reports_csv, \
    write_reports_text


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for name in ("seed", "mode", "scenario", "regime", "ell", "models_for_test", "name"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    if getattr(args, "attacks", None):
        config.attacks = tuple(args.attacks.split(","))
    return config


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="experiment config JSON (defaults mirror "
                                      "ExperimentConfig)")
    sub.add_argument("--runs-root", default="runs", help="run directory root")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--name")
    sub.add_argument("--mode", choices=["rand", "concat", "sr", "srwal"])
    sub.add_argument("--scenario", choices=["upslope", "update", "downslope"])
    sub.add_argument("--regime", choices=["feature_extraction", "classification"])
    sub.add_argument("--models-for-test", dest="models_for_test", choices=["final", "all"])
    sub.add_argument("--ell", type=int)


def cmd_ingest(args) -> int:
    corpus = load_corpus(args.manifest, args.descriptor)
    classes = sorted({s.class_label for s in corpus})
    summary = {"samples": len(corpus), "classes": len(classes),
               "image_shape": list(corpus[0].pixels.shape) if corpus else None}
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2))
    return 0


def _run_until(args, until: str, attacks: tuple[str, ...] | None = None) -> int:
    config = _load_config(args)
    if attacks is not None:
        config.attacks = attacks
    result = run_experiment(config, args.runs_root, until=until)
    print(f"run directory: {result.run_dir}")
    for rep in result.reports:
        print(f"  {rep.metric:<22} {rep.value:.4f} ({rep.true_positives}/{rep.trials})")
    return 0


def cmd_train_target(args) -> int:
    return _run_until(args, "target")


def cmd_attack_invert(args) -> int:
    return _run_until(args, "attack", attacks=("inversion",))


def cmd_attack_mi(args) -> int:
    return _run_until(args, "attack", attacks=("mi",))


def cmd_evaluate(args) -> int:
    return _run_until(args, "evaluate")


def cmd_ablate(args) -> int:
    from .evaluation import snapshot_ablation, calibration_impostor_distances, \
        compute_far_threshold
    from .incorporation import build_vector_bank
    from .harness import _stage_dataset, _stage_target, _split_probe
    from .inversion import train_perceptual_net
    import numpy as np

    config = _load_config(args)
    subsets = [[int(i) for i in grp.split(",")] for grp in args.subsets.split(";")]
    corpus, split = _stage_dataset(config)
    attack_train, eval_images, probe_rest = _split_probe(split.probe, config.ell,
                                                         config.eval_size, config.seed)
    snapshots = _stage_target(config, split, probe_rest)
    perceptual = train_perceptual_net(
        np.stack([s.pixels for s in split.target_train]),
        np.array([s.class_label for s in split.target_train]), seed=config.seed + 3)
    impostors = calibration_impostor_distances(snapshots.final, split.target_train,
                                               seed=config.seed)
    threshold = compute_far_threshold(impostors, config.far_target)
    eval_records = list(zip(eval_images, build_vector_bank(snapshots, eval_images)))
    reports = snapshot_ablation(snapshots, subsets, "inversion",
                                probe_train=attack_train, eval_records=eval_records,
                                threshold=threshold, attack_config=config.attack,
                                perceptual_net=perceptual, seed=config.seed)
    out = Path(args.runs_root) / config.config_hash() / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(reports, out / "reports.csv")
    write_reports_text(reports, out / "reports.txt")
    for rep in reports:
        print(f"  subset {rep.extra['subset']:<12} {rep.metric} = {rep.value:.4f}")
    print(f"ablation reports: {out}")
    return 0


def cmd_report(args) -> int:
    out = render_report(args.runs, args.out)
    print(f"report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snapleak",
                                     description="Snapshot-leakage inversion and membership "
                                                 "inference experiments")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("ingest", help="load and validate an image corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--descriptor")
    p.add_argument("--out", help="write the corpus summary JSON here")
    p.set_defaults(func=cmd_ingest)

    for name, func, help_text in [
            ("train-target", cmd_train_target, "train the target and capture snapshots"),
            ("attack-invert", cmd_attack_invert, "train the inversion GAN"),
            ("attack-mi", cmd_attack_mi, "train the membership-inference attacker"),
            ("evaluate", cmd_evaluate, "run the full pipeline and report metrics")]:
        p = subs.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name.startswith("attack") or name == "evaluate":
            p.add_argument("--attacks", help="comma list: inversion,mi")
        p.set_defaults(func=func)

    p = subs.add_parser("ablate", help="retrain the attack on snapshot subsets")
    _add_config_flags(p)
    p.add_argument("--subsets", required=True,
                   help="semicolon-separated index groups, e.g. '1,2;0,1,2,3,4'")
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("report", help="merge finished runs into tables and plots")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # any failure must be a nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
