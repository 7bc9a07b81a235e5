"""Command-line entry point: ``care {gen-data,train,eval,compare,maps}``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or format
error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

from care.checkpoint import load_checkpoint, save_checkpoint
from care.errors import ConfigError, FormatError
from care.evaluation import (
    EvalConfig,
    compare_models,
    comparison_markdown,
    evaluate_checkpoint,
    export_maps,
    read_reports_csv,
    report_columns,
    write_comparison_csv,
    write_reports_csv,
)
from care.models import ModelConfig
from care.synthetic import DatasetManifest, make_dataset, read_dataset, sample_nshot, write_dataset
from care.training import DivergenceError, TrainConfig, train, write_log_csv

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
SECTIONS = ("dataset", "model", "train", "eval")
RESOLVED_NAME = "config.resolved.json"

logger = logging.getLogger("care")


# run config --------------------------------------------------------------------

def _dataclass_from(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    return cls(**d)


def load_run_config(path: Optional[str]) -> dict:
    """Read a JSON run config with optional ``dataset``/``model``/``train``/``eval`` sections."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}; expected some of {list(SECTIONS)}")
    return doc


def _overrides(args: argparse.Namespace, mapping: dict) -> dict:
    """Flag values that were actually given, keyed by config field name."""
    return {key: getattr(args, dest) for dest, key in mapping.items() if getattr(args, dest, None) is not None}


def write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_NAME).write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")


def parse_zetas(text: str):
    try:
        zetas = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--zeta: expected comma-separated fractions, got {text!r}") from None
    return zetas


# commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    section = {**cfg.get("dataset", {}), **_overrides(args, {"seed": "global_seed", "tiles_per_region": "tiles_per_region"})}
    allowed = {f.name for f in fields(DatasetManifest)} - {"splits", "channel_means", "channel_stds"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"dataset: unknown keys {sorted(unknown)}")
    manifest = DatasetManifest.from_dict(section)
    dataset = make_dataset(manifest)
    out = Path(args.out)
    write_dataset(dataset, out)
    write_resolved(out, {"dataset": {k: v for k, v in manifest.to_dict().items() if k not in ("splits", "channel_means", "channel_stds")}})
    print(f"wrote {len(dataset)} tiles to {out}")
    for i, (m, s) in enumerate(zip(manifest.channel_means, manifest.channel_stds)):
        print(f"channel {i}: mean={m:.6f} std={s:.6f}")
    return EXIT_OK


TRAIN_FLAGS = {
    "baseline": "baseline",
    "seed": "seed",
    "eta": "eta",
    "lam": "lam",
    "lr": "lr",
    "momentum": "momentum",
    "batch_size": "batch_size",
    "phase0_epochs": "phase0_epochs",
    "phase1_epochs": "phase1_epochs",
    "sort_granularity": "sort_granularity",
    "grad_clip": "grad_clip",
}
MODEL_FLAGS = {"base_width": "base_width", "depth": "depth", "confidence_init": "confidence_init"}


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    # baseline-specific defaults < config file < flags
    given = {**cfg.get("train", {}), **{("lambda" if k == "lam" else k): v for k, v in _overrides(args, TRAIN_FLAGS).items()}}
    base = TrainConfig.for_baseline(given.get("baseline", "care")).to_dict()
    train_cfg = TrainConfig.from_dict({**base, **given}).validate()
    model_cfg = _dataclass_from(ModelConfig, {**cfg.get("model", {}), **_overrides(args, MODEL_FLAGS)}, "model")
    dataset = read_dataset(args.data)
    if args.n is None:
        ids = dataset.split_ids("train")
    else:
        ids = sample_nshot(dataset.manifest, args.n, train_cfg.seed)
    x, y = dataset.arrays(ids)
    model_cfg.in_channels = x.shape[1]
    ckpt = train(x, y, train_cfg, model_cfg, dataset.normalization)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "model.ckpt")
    write_log_csv(ckpt.log, out / "log.csv")
    write_resolved(
        out,
        {"data": str(args.data), "n": args.n, "tiles": len(ids), "model": ckpt.model_config.to_dict(), "train": train_cfg.to_dict()},
    )
    last = ckpt.log[-1] if ckpt.log else None
    print(f"trained {train_cfg.baseline} on {len(ids)} tiles -> {out / 'model.ckpt'}")
    if last:
        print(f"final epoch {last['epoch']}: L0={last['L0']:.6f} L1={last['L1']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    section = dict(cfg.get("eval", {}))
    if args.zeta is not None:
        section["zeta_list"] = parse_zetas(args.zeta)
    section.update(_overrides(args, {"split": "split", "density_floor": "density_floor"}))
    eval_cfg = _dataclass_from(EvalConfig, section, "eval").validate()
    ckpt = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    report = evaluate_checkpoint(ckpt, dataset, eval_cfg, n=args.n or 0, model=args.model)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_reports_csv([report], path)
    write_resolved(path.parent, {"ckpt": str(args.ckpt), "data": str(args.data), "eval": asdict(eval_cfg)})
    # echo the CSV row that was written
    print(",".join(report_columns(eval_cfg.zeta_list)))
    print(path.read_text().splitlines()[1])
    return EXIT_OK


def cmd_compare(args) -> int:
    paths = [p for p in args.reports.split(",") if p]
    if len(paths) < 2:
        raise ConfigError("--reports needs at least two CSV files")
    reports = [r for p in paths for r in read_reports_csv(p)]
    rows = compare_models(reports)
    print(comparison_markdown(rows))
    if args.out:
        write_comparison_csv(rows, args.out)
    return EXIT_OK


def cmd_maps(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    if args.tile not in dataset.tiles:
        raise ConfigError(f"--tile: unknown tile id {args.tile}")
    files = export_maps(ckpt, dataset.tiles[args.tile], args.out)
    for f in files:
        print(f)
    return EXIT_OK


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="care", description="Confidence-aware regression on synthetic EO rasters.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="global dataset seed")
    p.add_argument("--tiles-per-region", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on an n-shot subset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="tiles per region (default: the whole train split)")
    p.add_argument("--baseline", help="care, gaussian_nll, error_sorting, absolute_error or ensemble:M")
    p.add_argument("--seed", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--phase0-epochs", type=int)
    p.add_argument("--phase1-epochs", type=int)
    p.add_argument("--sort-granularity", choices=["pixel", "image"])
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--base-width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--confidence-init", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a report CSV")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--zeta", help="comma-separated abstention thresholds, e.g. 0.2,0.1")
    p.add_argument("--split", choices=["val", "test"])
    p.add_argument("--density-floor", type=float)
    p.add_argument("--model", help="model label for the report (default: the baseline name)")
    p.add_argument("--n", type=int, help="shot count recorded in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="percentage improvement of the first report over the others")
    p.add_argument("--reports", required=True, help="comma-separated report CSVs")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("maps", help="export PGM panels for one tile")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tile", type=int, required=True)
    p.add_argument("--out", required=True, help="output prefix, e.g. maps/tile12")
    p.set_defaults(func=cmd_maps)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
