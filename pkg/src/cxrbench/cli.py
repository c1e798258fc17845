"""Command line front end.

Exit codes: 0 success, 1 partial run (some architecture failed),
2 configuration or input error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig, SyntheticSection, default_config
from .dataset import DatasetManifest
from .exceptions import CxrBenchError, FoldError

logger = logging.getLogger("cxrbench")

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT = 0, 1, 2


def _add_common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, metavar="PATH",
                        help="experiment YAML (default: bundled full recipe)")
    parser.add_argument("--seed", type=int, default=default, metavar="N",
                        help="override split, training and synthetic seeds")
    parser.add_argument("--output", type=Path, default=default, metavar="DIR", help="output directory")
    parser.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1, metavar="N",
                        help="folds trained in parallel")
    parser.add_argument("--synthetic", type=int, nargs=2, default=default, metavar=("NPOS", "NNEG"),
                        help="use a generated separable dataset instead of the real sources")
    parser.add_argument("--arch", action="append", default=default, metavar="NAME",
                        help="architecture to run (repeatable)")
    parser.add_argument("--k", type=int, default=default, help="number of folds")
    parser.add_argument("--epochs", type=int, default=default, help="training epochs")
    parser.add_argument("--no-pretrained", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="random backbone initialization (testing only)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrbench", description=__doc__.splitlines()[0])
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "ingest": "build the labeled manifest from the image sources",
        "split": "assign manifest records to stratified folds",
        "train": "cross-validate each architecture and save held-out predictions",
        "evaluate": "compute metric tables, confusion matrices and charts",
        "report": "render the markdown/CSV comparison sheet for a run directory",
        "run": "ingest, split, train and evaluate end to end",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p, suppress=True)
        if name == "report":
            p.add_argument("run_dir", nargs="?", type=Path, help="run directory (default: --output)")
    return parser


def effective_config(args: argparse.Namespace) -> ExperimentConfig:
    """File values first, then command-line overrides."""
    config = ExperimentConfig.load(args.config) if args.config else default_config()
    if args.synthetic is not None:
        n_pos, n_neg = args.synthetic
        syn = config.dataset.synthetic or SyntheticSection()
        config = replace(config, dataset=replace(config.dataset, synthetic=replace(syn, n_pos=n_pos, n_neg=n_neg)))
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.output is not None:
        config = replace(config, output_dir=str(args.output))
    if args.arch:
        config = replace(config, architectures=tuple(args.arch))
    if args.k is not None:
        config = replace(config, split=replace(config.split, k=args.k))
    if args.epochs is not None:
        config = replace(config, training=replace(config.training, epochs=args.epochs))
    if args.no_pretrained:
        config = replace(config, model=replace(config.model, pretrained=False))
    return config


def _manifest(config: ExperimentConfig) -> DatasetManifest:
    return pipeline.load_or_ingest(config)


def cmd_ingest(config: ExperimentConfig, args) -> int:
    manifest = pipeline.ingest(config)
    print(pipeline.describe_counts(manifest))
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_split(config: ExperimentConfig, args) -> int:
    plan = pipeline.split(config, _manifest(config))
    print(f"{plan.k} folds, sizes {plan.fold_sizes()}")
    return EXIT_OK


def cmd_train(config: ExperimentConfig, args) -> int:
    manifest = _manifest(config)
    plan = pipeline.load_or_split(config, manifest)
    outcome = pipeline.train(config, manifest, plan, args.jobs)
    failed = [a for a, r in outcome.items() if isinstance(r, Exception)]
    for a, r in outcome.items():
        print(f"{a}: {'FAILED ' + str(r) if a in failed else f'{len(r)} folds trained'}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_evaluate(config: ExperimentConfig, args) -> int:
    summaries = pipeline.evaluate(config, [a.value for a in config.architectures])
    for s in summaries:
        print(f"{s.display_name}: accuracy {100 * s.aggregate.mean['accuracy']:.2f} "
              f"± {100 * s.aggregate.std['accuracy']:.2f} %")
    missing = len(config.architectures) - len(summaries)
    return EXIT_PARTIAL if missing else EXIT_OK


def cmd_run(config: ExperimentConfig, args) -> int:
    record = pipeline.run(config, args.jobs)
    for arch, info in record.architectures.items():
        if info["status"] == "complete":
            m = info["aggregate"]["mean"]["accuracy"]
            print(f"{arch}: accuracy {100 * m:.2f} % over {info['training_runs']} folds")
        else:
            print(f"{arch}: FAILED {info['error']}")
    print(f"run record: {Path(config.output_dir) / pipeline.RUN_RECORD} ({record.status})")
    return record.exit_code


def cmd_report(config: ExperimentConfig, args) -> int:
    run_dir = args.run_dir or Path(config.output_dir)
    for p in pipeline.report(run_dir):
        print(p)
    record = pipeline.RunRecord.load(run_dir)
    return record.exit_code


COMMANDS = {
    "ingest": cmd_ingest,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = effective_config(args)
        if args.command in ("ingest", "split", "train", "evaluate", "run"):
            config.save(Path(config.output_dir) / "config.yaml")
        return COMMANDS[args.command](config, args)
    except FoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except CxrBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
