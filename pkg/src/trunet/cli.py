"""Command-line entry point: ``trunet <command> [options]``.

Exit codes: 0 success, 1 invalid configuration or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checks
from .errors import ConfigurationError, TrunetError, UsageError
from .experiments import (ExperimentConfig, Localization, compare, evaluate_checkpoint, gen_data,
                          load_dataset, localize, train_model, write_training_outputs)
from .models import ModelConfig

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("trunet")


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.phantom.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "input_mode", None) is not None:
        cfg.train.input_mode = args.input_mode
    return cfg.validate()


def manifest_path(args, cfg: ExperimentConfig) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(cfg.out_dir) / "data" / "manifest.json"


def read_boxes(path) -> dict:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"boxes file {p} does not exist; run localize first")
    return Localization.from_json(p.read_text()).boxes


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    dataset, manifest = gen_data(cfg, out)
    (out / "config.json").write_text(cfg.to_json())
    for name in ("train", "val", "test"):
        print(f"{name}: {len(dataset.split[name])} patients, {len(dataset.volumes(name))} volumes")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = resolve_config(args)
    dataset = load_dataset(manifest_path(args, cfg))
    result = localize(cfg, dataset, margin=args.margin)
    out = Path(args.output) if args.output else Path(cfg.out_dir) / "boxes.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.to_json())
    for pid, box in sorted(result.boxes.items()):
        print(f"patient {pid}: lo={list(box.lo)} hi={list(box.hi)}")
    print(f"boxes: {out}")
    return EXIT_OK


def _model_config(cfg: ExperimentConfig, kind: str) -> ModelConfig:
    for candidate in (cfg.model, cfg.baseline):
        if candidate.kind == kind:
            return candidate
    raise ConfigurationError(f"no model of kind {kind!r} in the experiment config")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    dataset = load_dataset(manifest_path(args, cfg))
    model_cfg = _model_config(cfg, args.model)
    result = train_model(model_cfg, cfg.train, dataset, read_boxes(args.boxes))
    out = Path(cfg.out_dir) / f"train_{args.model}"
    summary = write_training_outputs(result, cfg.train, out)
    print(json.dumps(summary, indent=1, sort_keys=True))
    print(f"outputs: {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    dataset = load_dataset(manifest_path(args, cfg))
    report = evaluate_checkpoint(args.checkpoint, dataset, args.split, args.cluster_removal,
                                 read_boxes(args.boxes))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{args.split}" + ("_clusters_removed" if args.cluster_removal else "")
    (out / f"{stem}.csv").write_text(report.to_csv())
    (out / f"{stem}.json").write_text(report.to_json())
    print(f"macro DSS {report.macro_dss:.4f}  macro HD95 {report.macro_hd95:.3f} mm")
    print(f"report: {out / stem}.csv")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.op or None
    for name in names or ():
        if name not in checks.REGISTRY:
            raise UsageError(f"unknown op {name!r}; choose from: {', '.join(checks.REGISTRY)}")
    seed = args.seed if args.seed is not None else 0
    results = checks.run_all(names, seed=seed, tol=args.tol)
    print(checks.format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    dataset = load_dataset(manifest_path(args, cfg))
    out = Path(cfg.out_dir) / "compare"
    out.mkdir(parents=True, exist_ok=True)
    result = compare(cfg, dataset, read_boxes(args.boxes), out_dir=out)
    print(result.to_csv(), end="")
    print(f"plot: {out / 'compare.svg'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults to the toy setup)")
    common.add_argument("--seed", type=int, help="overrides the data and training seeds")
    common.add_argument("--out-dir", help="output directory (default from config: runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="trunet", description="3-D hybrid transformer segmentation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the phantom dataset and manifest")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("localize", parents=[common], help="train the ROI localizer and write boxes")
    p.add_argument("--data", help="manifest path (default <out-dir>/data/manifest.json)")
    p.add_argument("--margin", type=int, help="box expansion in voxels (default from config)")
    p.add_argument("--output", help="boxes JSON path (default <out-dir>/boxes.json)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data")
    p.add_argument("--model", choices=("trunet", "res_unet"), default="trunet")
    p.add_argument("--input-mode", choices=("downsample", "patches", "crop_then_downsample"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--boxes", help="boxes JSON from localize (crop mode)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--cluster-removal", action="store_true")
    p.add_argument("--boxes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--op", action="append", help="restrict to one registered op (repeatable)")
    p.add_argument("--tol", type=float, default=checks.DEFAULT_TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", parents=[common], help="TRUNet vs residual U-Net convergence run")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--input-mode", choices=("downsample", "patches", "crop_then_downsample"))
    p.add_argument("--boxes")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrunetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
