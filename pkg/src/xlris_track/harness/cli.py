"""Command-line entry point: ``xlris-track <verb> [--config ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import STAGES, ConfigError, load_config, profile_path
from .pipeline import Pipeline, RunLockedError, StageFailure

VERBS = STAGES + ("all",)
EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xlris-track",
                                description="RIS-assisted near-field tracking pipeline")
    p.add_argument("verb", choices=VERBS, help="stage to run, or 'all'")
    p.add_argument("--config", default="desk",
                   help="JSON config path or bundled profile name (desk, full)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", default="runs", help="output root; runs go to <out>/<config hash>")
    p.add_argument("--force", action="store_true",
                   help="rerun the requested stage(s) even if already complete")
    p.add_argument("--stage-only", action="store_true",
                   help="run only the named stage; upstream artifacts must exist")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(arg: str):
    path = Path(arg)
    if not path.exists() and not arg.endswith(".json"):
        path = profile_path(arg)
    return load_config(path)


def stages_for(verb: str, config_stages, stage_only: bool):
    if verb == "all":
        return [s for s in STAGES if s in config_stages]
    if stage_only:
        return [verb]
    return list(STAGES[:STAGES.index(verb) + 1])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    stages = stages_for(args.verb, cfg.stages, args.stage_only)
    forced = stages if (args.force and args.verb == "all") else ([args.verb] if args.force else [])
    pipe = Pipeline(cfg, args.out)
    try:
        report = pipe.run(stages, force_stages=forced)
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"partial report: {pipe.run_dir / 'report.json'}", file=sys.stderr)
        return EXIT_STAGE
    except RunLockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"run directory: {report.run_dir}")
    for s in report.stages:
        print(f"  {s.name:<17} {s.status:<8} {s.seconds:8.1f} s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
