"""Command-line entry point: generate, split, train, probe, evaluate, crossval."""

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

from pydantic import ValidationError

from . import __version__
from .config import (PRESET_NAMES, REGIMES, ProbeConfig, TrainConfig,
                     config_error_from_validation, describe_fields,
                     resolve_train_config, settings)
from .data import (LabeledDataset, generate_synthetic, ingest, read_packed,
                   stratified_kfold, synthetic_preset, write_dataset,
                   write_packed)
from .encoder import Checkpoint, load_checkpoint, save_checkpoint, standardization_from
from .evaluation import evaluate_model, export_embeddings, write_report
from .exceptions import ConfigError, DataError, RunLockedError, SSLKitError
from .models import FoldPlan, RunManifest, SyntheticSpec
from .training import RunWriter, cross_validate, linear_probe, train
from .utils import json_digest

logger = logging.getLogger(__name__)

SYNTHETIC_PRESETS = ("desk-longtail", "marrow-longtail", "minimal")
PACKED_NAME = "dataset.imset"


def _parse_overrides(items: Optional[List[str]]) -> Dict[str, Any]:
    """``FIELD=VALUE`` pairs; values are read as JSON when possible."""
    overrides: Dict[str, Any] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError("--set", item, "expected FIELD=VALUE")
        key, raw = item.split("=", 1)
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


def _read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError("File not found", str(path)) from None
    except (OSError, ValueError) as exc:
        raise DataError(f"Cannot read JSON: {exc}", str(path)) from exc


def load_dataset(path: Path) -> LabeledDataset:
    """A packed ``IMSET1`` file, or a directory with ``manifest.csv``."""
    path = Path(path)
    if path.is_file():
        return read_packed(path)
    return ingest(path)


def _load_fold_plan(path: Optional[Path], dataset: LabeledDataset) -> Optional[FoldPlan]:
    if path is None:
        return None
    try:
        plan = FoldPlan.model_validate(_read_json(path))
    except ValidationError as exc:
        raise DataError(f"Invalid fold plan: {exc.errors()[0]['msg']}", str(path)) from exc
    if len(plan.assignments) != len(dataset):
        raise DataError(
            f"Fold plan covers {len(plan.assignments)} samples, dataset has {len(dataset)}", str(path)
        )
    return plan


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise ConfigError("--out", None, f"is required for the {args.command} command")
    return Path(args.out)


@contextmanager
def run_lock(run_dir: Path) -> Iterator[Path]:
    """Exclusive ``.lock`` file guarding a run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(str(run_dir)) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        yield lock_path
    finally:
        os.close(fd)
        lock_path.unlink(missing_ok=True)


def write_manifest(
    run_dir: Path,
    command: str,
    config: Dict[str, Any],
    dataset: Optional[LabeledDataset],
    args: argparse.Namespace,
) -> RunManifest:
    manifest = RunManifest(
        command=command,
        config=config,
        dataset_fingerprint=dataset.fingerprint() if dataset is not None else None,
        code_version=__version__,
        arguments={k: str(v) for k, v in sorted(vars(args).items()) if k != "handler"},
        started_at=datetime.now(timezone.utc),
    )
    _save_manifest(run_dir, manifest)
    logger.info("%s provenance %s", command, json_digest(manifest.without_timestamps())[:12])
    return manifest


def _save_manifest(run_dir: Path, manifest: RunManifest) -> None:
    (run_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _finish_manifest(run_dir: Path, manifest: RunManifest) -> None:
    _save_manifest(run_dir, manifest.model_copy(update={"finished_at": datetime.now(timezone.utc)}))


def _train_config(args: argparse.Namespace) -> TrainConfig:
    fields = _read_json(args.config) if args.config else {}
    if not isinstance(fields, dict):
        raise DataError("Config file must contain a JSON object", str(args.config))
    overrides = _parse_overrides(args.set)
    if args.regime is not None:
        overrides["regime"] = args.regime
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    return resolve_train_config(args.preset, fields, overrides)


def cmd_generate(args: argparse.Namespace) -> int:
    out = _require_out(args)
    if args.spec:
        try:
            spec = SyntheticSpec.model_validate(_read_json(args.spec))
        except ValidationError as exc:
            raise config_error_from_validation(exc) from exc
    else:
        spec = synthetic_preset(args.preset)
    dataset = generate_synthetic(spec, seed=args.seed or 0)
    write_dataset(dataset, out)
    if args.packed:
        write_packed(dataset, out / PACKED_NAME)
    counts = ", ".join(f"{n}={c}" for n, c in zip(dataset.class_names, dataset.class_counts))
    print(f"Wrote {len(dataset)} images in {dataset.n_classes} classes to {out} ({counts})")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    plan = stratified_kfold(dataset, args.k, seed=args.seed or 0)
    default = Path(args.dataset) if Path(args.dataset).is_dir() else Path(args.dataset).parent
    out = Path(args.out) if args.out else default / "foldplan.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    print(f"Wrote {plan.k}-fold plan to {out} (fold sizes {plan.fold_sizes()})")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    out = _require_out(args)
    dataset = load_dataset(args.dataset)
    plan = _load_fold_plan(args.foldplan, dataset)
    with run_lock(out):
        manifest = write_manifest(out, "train", config.model_dump(mode="json"), dataset, args)
        writer = RunWriter(out, config)
        result = train(config, dataset, plan, args.fold, writer)
        if plan is not None and result.classifier is not None:
            report = evaluate_model(
                result.encoder, result.classifier, dataset, plan, args.fold, result.standardization
            )
            write_report(report, out)
            print(report.format_table())
        _finish_manifest(out, manifest)
    print(f"Run written to {out} (last checkpoint {writer.last_checkpoint})")
    return 0


def _checkpoint_probe_config(checkpoint: Checkpoint) -> ProbeConfig:
    stored = checkpoint.metadata.get("config")
    if not stored:
        return ProbeConfig()
    return TrainConfig.model_validate(stored).probe


def cmd_probe(args: argparse.Namespace) -> int:
    out = _require_out(args)
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    plan = _load_fold_plan(args.foldplan, dataset)
    probe_config = _checkpoint_probe_config(checkpoint)
    updates = _parse_overrides(args.set)
    if args.seed is not None:
        updates["seed"] = args.seed
    if updates:
        try:
            probe_config = ProbeConfig.model_validate({**probe_config.model_dump(), **updates})
        except ValidationError as exc:
            raise config_error_from_validation(exc) from exc
    standardization = standardization_from(checkpoint)

    with run_lock(out):
        manifest = write_manifest(out, "probe", probe_config.model_dump(mode="json"), dataset, args)
        result = linear_probe(
            checkpoint.encoder, dataset, probe_config, plan, args.fold, standardization
        )
        write_report(result.report, out)
        metadata = {**checkpoint.metadata, "probe": probe_config.model_dump(mode="json")}
        save_checkpoint(
            Checkpoint(encoder=checkpoint.encoder, classifier=result.head, metadata=metadata),
            out / "probe.ckpt",
        )
        if args.export_embeddings:
            export_embeddings(checkpoint.encoder, dataset, out / "embeddings.csv", standardization)
        _finish_manifest(out, manifest)
    print(result.report.format_table())
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    out = _require_out(args)
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.classifier is None:
        raise DataError("Checkpoint has no classifier head; run the probe command first", str(args.checkpoint))
    dataset = load_dataset(args.dataset)
    plan = _load_fold_plan(args.foldplan, dataset)
    report = evaluate_model(
        checkpoint.encoder, checkpoint.classifier, dataset, plan, args.fold, standardization_from(checkpoint)
    )
    write_report(report, out)
    print(report.format_table())
    return 0


def cmd_crossval(args: argparse.Namespace) -> int:
    config = _train_config(args)
    out = _require_out(args)
    dataset = load_dataset(args.dataset)
    plan = _load_fold_plan(args.foldplan, dataset) or stratified_kfold(dataset, args.k, config.seed)
    with run_lock(out):
        manifest = write_manifest(out, "crossval", config.model_dump(mode="json"), dataset, args)
        plan.save(out / "foldplan.json")
        result = cross_validate(config, dataset, plan, out)
        _finish_manifest(out, manifest)
    summary = result.summary
    print(
        f"{summary.n_folds}-fold macro-F1: mean {summary.macro_f1_mean} "
        f"(std {summary.macro_f1_std})"
    )
    return 0


def _add_training_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file of TrainConfig fields (may name a preset)")
    parser.add_argument("--preset", choices=PRESET_NAMES, help="Named configuration preset")
    parser.add_argument("--regime", help=f"Training regime: {', '.join(REGIMES)}")
    parser.add_argument("--epochs", type=int, help="Number of epochs")
    parser.add_argument(
        "--set", action="append", metavar="FIELD=VALUE", help="Override a config field (dotted for nested)"
    )
    parser.add_argument("--dataset", type=Path, required=True, help="Dataset directory or packed file")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Root seed of all randomness")
    common.add_argument("--out", type=Path, default=None, help="Output path")
    common.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default=None,
        help="Logging level",
    )

    parser = argparse.ArgumentParser(
        prog="sslkit", description="Long-tail image representation learning toolkit"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="Write a synthetic dataset")
    source = generate.add_mutually_exclusive_group()
    source.add_argument("--preset", choices=SYNTHETIC_PRESETS, default="minimal")
    source.add_argument("--spec", type=Path, help="JSON SyntheticSpec file")
    generate.add_argument("--packed", action="store_true", help=f"Also write {PACKED_NAME}")
    generate.set_defaults(handler=cmd_generate)

    split = commands.add_parser("split", parents=[common], help="Write a stratified fold plan")
    split.add_argument("--dataset", type=Path, required=True)
    split.add_argument("--k", type=int, default=5)
    split.set_defaults(handler=cmd_split)

    fields_help = "config fields:\n" + "\n".join(describe_fields())
    train_cmd = commands.add_parser(
        "train",
        parents=[common],
        help="Train one regime on one fold",
        epilog=fields_help,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_training_options(train_cmd)
    train_cmd.add_argument("--foldplan", type=Path)
    train_cmd.add_argument("--fold", type=int, default=0)
    train_cmd.set_defaults(handler=cmd_train)

    probe = commands.add_parser("probe", parents=[common], help="Linear probe on a frozen encoder")
    probe.add_argument("--checkpoint", type=Path, required=True)
    probe.add_argument("--dataset", type=Path, required=True)
    probe.add_argument("--foldplan", type=Path)
    probe.add_argument("--fold", type=int, default=0)
    probe.add_argument("--set", action="append", metavar="FIELD=VALUE", help="Override a probe field")
    probe.add_argument("--export-embeddings", action="store_true", help="Also write embeddings.csv")
    probe.set_defaults(handler=cmd_probe)

    evaluate = commands.add_parser("evaluate", parents=[common], help="Metrics of a classifier checkpoint")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--dataset", type=Path, required=True)
    evaluate.add_argument("--foldplan", type=Path)
    evaluate.add_argument("--fold", type=int, default=0)
    evaluate.set_defaults(handler=cmd_evaluate)

    crossval = commands.add_parser(
        "crossval",
        parents=[common],
        help="Train and evaluate every fold",
        epilog=fields_help,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_training_options(crossval)
    crossval.add_argument("--foldplan", type=Path)
    crossval.add_argument("--k", type=int, default=5)
    crossval.set_defaults(handler=cmd_crossval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (args.log_level or settings.log_level).upper()
    logging.basicConfig(level=getattr(logging, level), format=settings.log_format)
    logging.getLogger().setLevel(getattr(logging, level))

    try:
        return int(args.handler(args))
    except ValidationError as exc:
        error: SSLKitError = config_error_from_validation(exc)
    except SSLKitError as exc:
        error = exc
    logger.debug("Command failed", exc_info=True)
    print(f"error: {error.message}", file=sys.stderr)
    return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
