"""Command line front end for the hair-card pipeline.

Subcommands mirror the pipeline stages; every PipelineConfig field is
also a flag, and flags override the config file. Exit codes: 0 success,
2 usage (argparse), 3 configuration, 4 lock held, and one distinct code
per failing stage (see STAGE_EXIT below).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from .pipeline import (PipelineConfig, PipelineConfigError,
                       PipelineLockError, StageError, config_from_sources,
                       preview, run_pipeline, run_single_stage)

EXIT_CONFIG = 3
EXIT_LOCK = 4
STAGE_EXIT = {"load": 10, "cluster": 11, "fit": 12, "project": 13,
              "reduce": 14, "optimize": 15, "bake": 16, "cap": 17,
              "eval": 18, "preview": 19}

STAGE_COMMANDS = ("cluster", "fit", "project", "reduce", "optimize",
                  "bake", "cap", "eval")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="key = value settings file")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=f.name, default=None,
                                type=type(f.default))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="strandcards",
        description="Convert a strand hair model into a hair-card model.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every pipeline stage in order")
    _add_config_flags(run)

    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run only the {name} stage "
                                      "(predecessors must be complete)")
        _add_config_flags(p)

    pv = sub.add_parser("preview", help="render stage artifacts to PNGs")
    _add_config_flags(pv)
    pv.add_argument("--what", choices=("cluster", "final"),
                    default="final")
    pv.add_argument("--views", type=int, default=None,
                    help="view count (default: eval_views)")
    return parser


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {f.name: getattr(args, f.name)
                 for f in fields(PipelineConfig)
                 if getattr(args, f.name, None) is not None}
    return config_from_sources(config_file=args.config, overrides=overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
    except (PipelineConfigError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            out = run_pipeline(config)
            print(out)
        elif args.command == "preview":
            files = preview(config, args.what, n_views=args.views)
            for p in files:
                print(p)
        else:
            # "load" has no dedicated subcommand; "run" covers it, and
            # every stage command loads lazily through its dependencies
            out = run_single_stage(config, args.command)
            print(out)
    except PipelineConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineLockError as e:
        print(f"lock error: {e}", file=sys.stderr)
        return EXIT_LOCK
    except StageError as e:
        print(e, file=sys.stderr)
        return STAGE_EXIT[e.stage]
    return 0


if __name__ == "__main__":
    sys.exit(main())
