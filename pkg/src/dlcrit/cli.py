"""Command line entry point: ``dlcrit <stage> --config cfg.json --out DIR``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .errors import DlcritError, StageError
from .finders import METHODS

STAGES = ["gen-data", "catalog", "train", "sample-seeds", "find", "match", "emit-plots", "run-all"]


def build_parser():
    parser = argparse.ArgumentParser(prog="dlcrit", description=__doc__)
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--method", choices=METHODS,
                        help="restrict `find`/`run-all` to one method")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args):
    doc = json.loads(args.config.read_text()) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.method is not None:
        doc["methods"] = [args.method]
    return ex.ExperimentConfig.from_dict(doc)


def _dispatch(stage, cfg, out):
    if stage == "gen-data":
        ex.stage_gen_data(cfg, out)
    elif stage == "catalog":
        ex.stage_catalog(cfg, out)
    elif stage == "train":
        ex.stage_train(cfg, out)
    elif stage == "sample-seeds":
        ex.stage_sample_seeds(cfg, out)
    elif stage == "find":
        ex.stage_find(cfg, out)
    elif stage == "match":
        report = ex.stage_match(cfg, out)
        print(json.dumps(report.summary, indent=2))
    elif stage == "emit-plots":
        ex.emit_plot_data(out, cfg.loss_rel_tol)
    else:
        report = ex.run_experiment(cfg, out)
        print(json.dumps(report.summary, indent=2))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (DlcritError, ValueError, OSError) as exc:
        print(f"dlcrit: config: {exc}", file=sys.stderr)
        return 2
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        _dispatch(args.stage, cfg, args.out)
    except StageError as exc:
        print(f"dlcrit: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 1
    except (DlcritError, OSError) as exc:
        print(f"dlcrit: stage {args.stage} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
