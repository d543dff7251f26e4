"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or inputs, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from pydantic import ValidationError

from . import pipeline
from .config import ExperimentConfig, load_config

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

logger = logging.getLogger("ganseg")


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = cfg.model_dump(mode="json")
    if args.seed is not None:
        data["seed"] = args.seed
    if getattr(args, "subjects", None) is not None:
        data["dataset"]["phantom"]["n_train"] = args.subjects
    if getattr(args, "repeats", None) is not None:
        data["train"]["repeats"] = args.repeats
    if getattr(args, "budget", None) is not None:
        data["train"]["sample_budget"] = args.budget
    return ExperimentConfig.model_validate(data)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="master seed; overrides the config value")
    p.add_argument("--workers", type=int, default=1, help="parallel GAN members / segmenter repeats")
    p.add_argument("--force", action="store_true", help="redo units that already have artifacts")
    p.add_argument("--out", help=f"output root; defaults to ${pipeline.OUTPUT_ENV} or the config's output_dir")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganseg", description="GAN-ensemble synthetic data for tumour segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate and preprocess phantom subjects")
    _common(p)
    p.add_argument("--subjects", type=int, help="number of training subjects")

    p = sub.add_parser("preprocess", help="preprocess NIfTI subject directories")
    _common(p)
    p.add_argument("--input", help="training subjects directory")
    p.add_argument("--test-input", help="test subjects directory")

    p = sub.add_parser("train-gan", help="train the GAN ensemble members")
    _common(p)
    p.add_argument("--dump-samples", type=int, default=0, metavar="N", help="write an N-row sample grid per member")

    p = sub.add_parser("gen-synth", help="sample synthetic datasets for each ensemble size")
    _common(p)

    p = sub.add_parser("train-seg", help="train segmenter repeats")
    _common(p)
    p.add_argument("--data", choices=["real", "synth", "mixed"], help="only this training-data mode")
    p.add_argument("--k", type=int, action="append", help="only these ensemble sizes (repeatable)")
    p.add_argument("--repeats", type=int, help="repeat count; overrides the config value")
    p.add_argument("--budget", type=int, help="sample budget; overrides the config value")

    p = sub.add_parser("evaluate", help="per-subject Dice of every trained segmenter")
    _common(p)
    p.add_argument("--dump-overlays", type=int, default=None, metavar="N", help="write N prediction overlay panels")

    p = sub.add_parser("report", help="result table and significance tests")
    _common(p)

    p = sub.add_parser("run", help="every stage in order")
    _common(p)
    p.add_argument("--dump-samples", type=int, default=0, metavar="N")

    p = sub.add_parser("show-config", help="print the effective config and its hash")
    _common(p)
    return parser


def _dispatch(args, ws: pipeline.Workspace) -> None:
    cmd = args.command
    if cmd == "phantom":
        pipeline.stage_phantom(ws, args.force)
    elif cmd == "preprocess":
        pipeline.stage_preprocess(ws, args.input, args.test_input, args.force)
    elif cmd == "train-gan":
        pipeline.stage_train_gan(ws, args.workers, args.force, args.dump_samples)
    elif cmd == "gen-synth":
        pipeline.stage_gen_synth(ws, args.force)
    elif cmd == "train-seg":
        pipeline.stage_train_seg(ws, args.workers, args.data, args.k)
    elif cmd == "evaluate":
        pipeline.stage_evaluate(ws, args.dump_overlays)
    elif cmd == "report":
        _, md = pipeline.stage_report(ws)
        print(md, end="")
    elif cmd == "run":
        pipeline.run_all(ws, args.workers, args.dump_samples)
        print((ws.path("report", "table.md")).read_text(), end="")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "phantom" and args.subjects is not None and args.subjects < 1:
            raise pipeline.StageValidationError("--subjects must be at least 1")
        config = _config_from_args(args)
        if args.command == "show-config":
            print(json.dumps({"config_hash": config.config_hash(), "config": config.model_dump(mode="json")},
                             indent=2, sort_keys=True))
            return EXIT_OK
        ws = pipeline.Workspace.create(config, args.out)
        logger.info("workspace %s", ws.root)
        _dispatch(args, ws)
    except (ValidationError, pipeline.StageValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (pipeline.StageRuntimeError, RuntimeError, ArithmeticError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
