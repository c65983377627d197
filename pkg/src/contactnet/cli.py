"""Command-line entry point.

Exit codes: 0 success, 2 config problem, 3 survey-data problem, 4 a pipeline
stage failed after validation.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import ConfigError, PipelineStageError, run_pipeline
from .survey import SurveyFormatError

_COMMANDS = (
    ("ingest", "parse the survey and emit ego vectors"),
    ("fit", "ingest, then fit the generator model"),
    ("generate", "build a network from fitted models"),
    ("fidelity", "measure model-vs-data reconstruction error"),
    ("simulate", "run epidemics on a generated or cached network"),
    ("sweep", "epidemic statistics over a tau grid or R0 targets"),
    ("all", "full pipeline"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contactnet",
        description="Survey-derived contact networks and SEIR epidemics on them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's master seed")
        p.add_argument("--profile", default="paper", choices=("paper", "desk"),
                       help="scale preset; desk shrinks sizes for laptop runs")
        p.add_argument("--out-dir", default="runs",
                       help="root directory for run outputs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_dir = run_pipeline(
            args.config,
            args.command,
            seed=args.seed,
            profile=args.profile,
            out_root=args.out_dir,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SurveyFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except PipelineStageError as exc:
        if isinstance(exc.cause, SurveyFormatError):
            print(f"data error: {exc}", file=sys.stderr)
            return 3
        print(f"error: {exc}", file=sys.stderr)
        return 4
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
