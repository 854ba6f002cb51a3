"""
Command-line entry point: ``genfsl <command> [options]``.

Commands: synth, pretrain, finetune, evaluate, experiment, gradcheck.
Exit codes: 0 success, 1 usage or config error, 2 data error,
3 training divergence, 4 I/O or checkpoint error.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import evaluation as E
from .dataio import AugmentationConfig, ShotSpec, generate_synthetic_dataset, load_split, select_few_shot
from .errors import CheckpointError, ConfigError, DataError, DivergenceError, GenFSLError, TransferError
from .gradcheck import run_gradcheck_suite
from .models import (
    build_classifier_from_encoder,
    classifier_forward,
    classifier_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, finetune_classifier, pretrain_autoencoder

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

_FT = TrainConfig.finetune()

DEFAULT_CONFIG = {
    "source_data": {"split": "train"},
    "target_data": {"train_split": "train", "test_split": "test", "positive_class": None},
    "model": {"image_size": 64, "channels": [16, 32, 64], "fc_width": 128},
    "pretrain": {
        "epochs": 20,
        "batch_size": 32,
        "lr": 1e-3,
        "seed": 0,
        "val_fraction": 0.1,
        "augmentation": asdict(AugmentationConfig()),
    },
    "finetune": {
        "shots": "20",
        "seed": 0,
        "weighted_sampling": False,
        "epochs": _FT.epochs,
        "batch_size": _FT.batch_size,
        "lr": _FT.learning_rate,
        "early_stop_patience": _FT.early_stop_patience,
        "augmentation": asdict(_FT.augmentation),
    },
    "evaluate": {"threshold": 0.5, "sweep": False, "balanced_test": False, "repeats": 10, "confidence": 0.95},
}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(path=None) -> dict:
    """Defaults overlaid with the JSON file at ``path``; unknown keys are rejected."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        given = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(given, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _merge(DEFAULT_CONFIG, given, "")


def _augmentation(section) -> AugmentationConfig:
    return AugmentationConfig(**section)


def pretrain_config(cfg: dict) -> TrainConfig:
    p = cfg["pretrain"]
    return TrainConfig(
        epochs=p["epochs"],
        batch_size=p["batch_size"],
        learning_rate=p["lr"],
        seed=p["seed"],
        augmentation=_augmentation(p["augmentation"]),
        val_fraction=p["val_fraction"],
    )


def finetune_config(cfg: dict, spec: ShotSpec | None = None) -> TrainConfig:
    f = cfg["finetune"]
    return TrainConfig.finetune(
        epochs=f["epochs"],
        batch_size=f["batch_size"],
        learning_rate=f["lr"],
        seed=f["seed"],
        weighted_sampling=f["weighted_sampling"],
        early_stop_patience=f["early_stop_patience"],
        augmentation=_augmentation(f["augmentation"]),
        shot_spec=spec,
    )


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _sibling(path: Path, suffix: str) -> Path:
    """``clf.gfsl`` -> ``clf.<suffix>``; used for logs and config echoes next to a file output."""
    return path.with_name(path.stem + suffix)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    generate_synthetic_dataset(args.n, args.size, args.seed, out, "train")
    if args.n_test:
        # a different seed keeps test images disjoint from training images
        generate_synthetic_dataset(args.n_test, args.size, args.seed + 1, out, "test")
    _write_json(out / "synth.json", {"n": args.n, "n_test": args.n_test, "size": args.size, "seed": args.seed})
    print(f"wrote synthetic dataset to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args.config)
    m = cfg["model"]
    data = load_split(args.data, cfg["source_data"]["split"], m["image_size"])
    out = Path(args.out)
    model, log = pretrain_autoencoder(data, pretrain_config(cfg), tuple(m["channels"]))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params, out)
    log.to_csv(_sibling(out, ".log.csv"))
    _write_json(_sibling(out, ".config.json"), cfg)
    first, last = log.train_losses[0], log.train_losses[-1]
    print(f"pretrained {len(log.records)} epochs on {len(data)} images: mse {first:.5f} -> {last:.5f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = resolve_config(args.config)
    if args.shots is not None:
        cfg["finetune"]["shots"] = args.shots
    if args.seed is not None:
        cfg["finetune"]["seed"] = args.seed
    f, m, t = cfg["finetune"], cfg["model"], cfg["target_data"]
    spec = ShotSpec.parse(f["shots"], f["seed"])
    data = load_split(args.data, t["train_split"], m["image_size"], t["positive_class"])
    subset = select_few_shot(data, spec)
    model = build_classifier_from_encoder(args.encoder, m["image_size"], f["seed"], m["fc_width"])
    model, log = finetune_classifier(model, subset, finetune_config(cfg, spec))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params, out)
    log.to_csv(_sibling(out, ".log.csv"))
    _write_json(_sibling(out, ".config.json"), cfg)
    print(f"fine-tuned {spec.label()} ({len(subset)} images) for {len(log.records)} epochs: bce {log.train_losses[-1]:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args.config)
    e, t = cfg["evaluate"], cfg["target_data"]
    for key in ("threshold", "sweep", "balanced_test"):
        value = getattr(args, key)
        if value is not None:
            e[key] = value
    model = classifier_from_checkpoint(args.model)
    test = load_split(args.data, t["test_split"], model.image_size, t["positive_class"])
    if e["balanced_test"]:
        test = E.balanced_test_view(test, cfg["finetune"]["seed"])
    scores = classifier_forward(model, test.images)
    cm, m = E.evaluate_scores(scores, test.labels, e["threshold"])
    report = {
        "model": str(args.model),
        "n_test": len(test),
        "class_counts": {test.class_names[c]: n for c, n in test.class_counts.items()},
        "confusion": asdict(cm),
        "metrics": m.as_dict(),
        "intervals": {k: list(v) for k, v in E.confidence_intervals(cm, e["confidence"]).items()},
        "config": cfg,
    }
    rows = [("", m)]
    if e["sweep"]:
        sweep = E.threshold_sweep(scores, test.labels)
        report["sweep"] = [s.as_dict() for _, s in sweep]
        rows += [("", s) for _, s in sweep]
    out = Path(args.out)
    _write_json(out, report)
    E.write_metric_rows(_sibling(out, ".csv"), rows)
    print(
        f"threshold {m.threshold:g}: sensitivity {m.sensitivity:.4f} specificity {m.specificity:.4f} "
        f"f1 {m.f1:.4f} accuracy {m.accuracy:.4f} mcc {m.mcc:.4f}"
    )
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = resolve_config(args.config)
    if args.shots is not None:
        cfg["finetune"]["shots"] = args.shots
    if args.repeats is not None:
        cfg["evaluate"]["repeats"] = args.repeats
    f, m, t, e = cfg["finetune"], cfg["model"], cfg["target_data"], cfg["evaluate"]
    spec = ShotSpec.parse(f["shots"], f["seed"])
    pool = load_split(args.data, t["train_split"], m["image_size"], t["positive_class"])
    test = load_split(args.data, t["test_split"], m["image_size"], t["positive_class"])
    encoder = load_checkpoint(args.encoder)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)

    def save_run(result, model, log):
        run_dir = out / f"run_{result.index:02d}"
        run_dir.mkdir(exist_ok=True)
        save_checkpoint(model.params, run_dir / "classifier.gfsl")
        log.to_csv(run_dir / "log.csv")
        _write_json(run_dir / "metrics.json", {"seed": result.seed, **result.metrics.as_dict()})

    report = E.run_repeated_experiment(
        pool, test, encoder, spec, e["repeats"], finetune_config(cfg),
        base_seed=f["seed"], threshold=e["threshold"], fc_width=m["fc_width"],
        balanced_test=e["balanced_test"], confidence=e["confidence"], on_run=save_run,
    )
    report.extra["config"] = cfg
    report.write_json(out / "report.json")
    report.write_csv(out / "runs.csv")
    print(report.summary_line())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(args.instances, args.seed)
    for r in results:
        print(f"{r.layer:<18} max rel error {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_DIVERGED


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool_flag(parser, name, help):
    parser.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genfsl", description="Generative few-shot transfer learning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic two-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=250, help="images per class in the train split")
    p.add_argument("--n-test", type=int, default=100, help="images per class in the test split (0 to skip)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train the autoencoder on source images")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a classifier head on a frozen encoder")
    p.add_argument("--config")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shots", help="all, all-balanced or K")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a classifier on the test split")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float)
    _bool_flag(p, "sweep", "also report the 0.05-step threshold sweep")
    _bool_flag(p, "balanced-test", "subsample the majority test class")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="repeated random-subset fine-tuning")
    p.add_argument("--config")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shots")
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, E.RunFailedError):
        return exit_code_for(exc.cause)
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(exc, (CheckpointError, OSError)):
        return EXIT_IO
    if isinstance(exc, (DataError, TransferError)):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, TypeError)):
        return EXIT_USAGE
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GenFSLError, OSError, TypeError) as exc:
        print(f"genfsl {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
