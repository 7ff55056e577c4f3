"""
Command-line module for SourceCV.
Verbs: run, validate, gen and report.
"""

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from src.config import load_config, load_synth_config
from src.dataset import load_dataset
from src.errors import ConfigError, DataError
from src.experiments import run_experiment
from src.reference import load_reference_counts, validate_against_reference
from src.report import emit_reports, format_report, load_results
from src.synthgen import generate, write_synthetic

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.n_jobs is not None:
        if args.n_jobs == 0:
            raise ConfigError("--n-jobs must not be 0")
        cfg = replace(cfg, n_jobs=args.n_jobs)
    output_dir = args.output_dir or cfg.output_dir

    result = run_experiment(cfg)
    for path in emit_reports(result, output_dir):
        print(path)
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    ds = load_dataset(args.manifest)
    print(f"{len(ds)} records, {len(ds.label_space)} labels")
    for source, count in ds.sources.items():
        print(f"  {source}: {count}")

    if args.reference:
        report = validate_against_reference(ds, load_reference_counts(tolerance=args.tolerance))
        print(f"Reference check: {'ok' if report['ok'] else 'differences found'}")
        print(f"  total expected {report['total_expected']}, observed {report['total_observed']}")
        for diff in report["label_diffs"]:
            print(
                f"  {diff['label']} ({diff['name']}) in {diff['source']}: "
                f"expected {diff['expected']}, observed {diff['observed']}"
            )
        for key in ("missing_sources", "unexpected_sources", "unexpected_labels"):
            if report[key]:
                print(f"  {key}: {', '.join(report[key])}")
    return EXIT_OK


def _cmd_gen(args: argparse.Namespace) -> int:
    spec = load_synth_config(args.config)
    path = write_synthetic(generate(spec), args.out)
    print(path)
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    try:
        results = load_results(args.results)
    except ValueError as e:
        raise DataError(str(e))
    print(format_report(results))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sourcecv", description="Cross-validation reliability on unseen data sources"
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("-v", "--verbose", action="store_true", help="Same as --log-level DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run the experiment described by a YAML config")
    run.add_argument("config")
    run.add_argument("--output-dir", default=None)
    run.add_argument("--n-jobs", type=int, default=None)
    run.set_defaults(func=_cmd_run)

    validate = sub.add_parser("validate", help="Check a manifest and print source counts")
    validate.add_argument("manifest")
    validate.add_argument("--reference", action="store_true", help="Compare against the shipped label counts")
    validate.add_argument("--tolerance", type=float, default=0.0, help="Relative tolerance of the comparison")
    validate.set_defaults(func=_cmd_validate)

    gen = sub.add_parser("gen", help="Write a synthetic dataset")
    gen.add_argument("config")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen)

    report = sub.add_parser("report", help="Print a results.json file")
    report.add_argument("results")
    report.set_defaults(func=_cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else getattr(logging, args.log_level)
    logging.basicConfig(level=level, format=LOG_FORMAT)

    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except (DataError, IOError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA_ERROR
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
