"""
Command line entry point.

    python cli.py gen-data --out data
    python cli.py train --data data --out runs/full
    python cli.py eval --checkpoint runs/full/checkpoints/epoch_030.mxcm --data data --tau-sweep
    python cli.py export-cam --checkpoint ... --data data --ids 0,1,2
    python cli.py ablate --data data --seeds 3 --sweep alpha 0.1,0.2,0.5,1.0
    python cli.py serve --checkpoint ... --data data
"""
import argparse
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from config import RunConfig, first_error, resolve_config, run_config_for_checkpoint, write_resolved_config
from errors import ConfigError, MixcamError
from evalkit import format_table, iou_rows, write_csv
from logger import logger
from services.ablation_service import AblationService, loss_grid, sweep_configurations
from services.evaluation_service import SWEEP_CSV_NAME, EvaluationService, load_net
from services.training_service import TrainingService
from synthdata import export_samples, generate_dataset, load_dataset, save_dataset

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2


# ==================== ARGUMENTS ====================

def _parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = (part.strip() for part in pair.split("=", 1))
        overrides[key.replace("-", "_")] = value
    return overrides


def _csv_list(text: str, cast=str) -> List:
    try:
        return [cast(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="Flat key = value config file")
    parser.add_argument("--seed", type=int, help="Run seed (overrides the config file)")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any config field")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixcam", description="Mixup-CAM training and evaluation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate the synthetic shapes dataset")
    _add_common(gen)
    gen.add_argument("--export", type=int, default=0, metavar="N", help="Also export N samples per split as PPM/PGM")

    train = sub.add_parser("train", help="Train ClassNet with online mixup")
    _add_common(train)
    train.add_argument("--data", required=True, help="Dataset directory")
    train.add_argument("--resume", help="Epoch checkpoint to continue from")

    evaluate = sub.add_parser("eval", help="Score pseudo labels on the validation split")
    _add_common(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--tau-sweep", action="store_true", help="Also sweep tau_bg over 0.1..0.9")

    export = sub.add_parser("export-cam", help="Export CAMs and pseudo labels for given samples")
    _add_common(export)
    export.add_argument("--checkpoint", required=True)
    export.add_argument("--data", required=True)
    export.add_argument("--ids", required=True, help="Comma separated sample ids")
    export.add_argument("--split", default="val", choices=["train", "val"])

    ablate = sub.add_parser("ablate", help="Loss-combination ablation and parameter sweeps")
    _add_common(ablate)
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--seeds", type=int, default=3, help="Number of seeds per configuration")
    ablate.add_argument("--rows", help="Comma separated subset of the grid rows")
    ablate.add_argument("--sweep", nargs=2, action="append", metavar=("PARAM", "VALUES"),
                        help="One-dimensional sweep, e.g. --sweep alpha 0.1,0.2,0.5")
    ablate.add_argument("--no-grid", action="store_true", help="Only run the requested sweeps")

    serve = sub.add_parser("serve", help="Serve CAM inference over HTTP")
    _add_common(serve)
    serve.add_argument("--checkpoint")
    serve.add_argument("--data")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def config_from_args(args: argparse.Namespace, checkpoint: Optional[str] = None) -> RunConfig:
    """
    Flags > config file > environment > defaults. Without --config, a
    checkpoint's run directory supplies its own resolved config.
    """
    config_path = args.config
    if config_path is None and checkpoint:
        candidate = run_config_for_checkpoint(checkpoint)
        if candidate is not None:
            config_path = str(candidate)
            logger.info(f"📄 Using run config {candidate}")
    overrides: Dict[str, object] = dict(_parse_overrides(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return resolve_config(config_path, overrides)


# ==================== COMMANDS ====================

def cmd_gen_data(args) -> int:
    config = config_from_args(args)
    out = Path(args.out or "data")
    dataset = generate_dataset(config.dataset_config(), workers=config.workers, progress=args.progress)
    save_dataset(dataset, out)
    write_resolved_config(config, out)
    if args.export:
        export_samples(dataset.train, out / "preview", args.export)
        export_samples(dataset.val, out / "preview", args.export)
    print(f"wrote {len(dataset.train)} train / {len(dataset.val)} val samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = config_from_args(args)
    dataset = load_dataset(args.data)
    trainer = TrainingService(
        config,
        dataset.train.training_view(),
        dataset.val.training_view(),
        progress=args.progress,
    )
    if args.resume:
        trainer.resume(args.resume)
    summary = trainer.train()
    print(summary.model_dump_json(indent=2))
    return EXIT_OK


def _evaluator(args, config: RunConfig) -> EvaluationService:
    net = load_net(args.checkpoint, config)
    return EvaluationService(net, config.pseudo_label_config(), workers=config.workers, progress=args.progress)


def cmd_eval(args) -> int:
    config = config_from_args(args, args.checkpoint)
    dataset = load_dataset(args.data)
    evaluator = _evaluator(args, config)
    out = Path(args.out or Path(args.checkpoint).parent.parent / "eval")

    report = evaluator.evaluate(dataset.val)
    evaluator.write_report(report, out)
    print(format_table(iou_rows(report.iou)))
    print(
        f"\ncoverage {report.coverage:.4f}  uniformity {report.uniformity:.4f}  "
        f"accuracy {report.accuracy:.4f}  calibration_error {report.calibration_error:.4f}"
    )
    if args.tau_sweep:
        rows = evaluator.tau_sweep(dataset.val)
        write_csv(rows, out / SWEEP_CSV_NAME)
        print()
        print(format_table(rows))
    return EXIT_OK


def cmd_export_cam(args) -> int:
    config = config_from_args(args, args.checkpoint)
    dataset = load_dataset(args.data)
    split = dataset.split(args.split)
    ids = _csv_list(args.ids, int)
    samples = [split.get(i) for i in ids]
    evaluator = _evaluator(args, config)
    out = Path(args.out or Path(args.checkpoint).parent.parent / "cams")
    for sample in samples:
        for path in evaluator.export_cam(sample, out):
            print(path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = config_from_args(args)
    dataset = load_dataset(args.data)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    seeds = [config.seed + k for k in range(args.seeds)]
    service = AblationService(config, dataset)

    if not args.no_grid:
        rows = service.run_ablation(loss_grid(config, _csv_list(args.rows) if args.rows else None), seeds)
        print(format_table(rows))
    for parameter, values in args.sweep or ():
        configurations = sweep_configurations(config, parameter, _csv_list(values, float))
        rows = service.run_ablation(configurations, seeds, table_name=f"sweep_{parameter}")
        print()
        print(format_table(rows))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    if args.checkpoint:
        os.environ["MIXCAM_CHECKPOINT"] = args.checkpoint
    if args.data:
        os.environ["MIXCAM_DATA"] = args.data
    if args.config:
        os.environ["MIXCAM_RUN_CONFIG"] = args.config
    from main import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-cam": cmd_export_cam,
    "ablate": cmd_ablate,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error[{e.category}]: {e.detail}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as e:
        print(f"error[{ConfigError.category}]: {first_error(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except MixcamError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"error[{e.category}]: {e.detail}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
