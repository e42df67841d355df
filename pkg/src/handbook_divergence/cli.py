"""Command-line entry point: ``hbdiv <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .gateway import ModelConfig
from .pipeline import STAGES, RunConfig, load_run_config, run_pipeline

VERBS = ("validate", "index", "generate", "judge", "metrics", "report", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hbdiv", description=__doc__)
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", type=Path, help="INI-style run config")
    parser.add_argument("--corpus", type=Path, help="directory of handbook JSON files")
    parser.add_argument("--questions", type=Path, help="question JSON file")
    parser.add_argument("--out", type=Path, help="output root (default: out)")
    parser.add_argument("--run-name", help="run directory name under the output root")
    parser.add_argument("--center-map", type=Path, help="JSON map of center name -> center-NNN")
    parser.add_argument("--stages", help="comma-separated stage list for 'run'")
    parser.add_argument("--strict", action="store_true", help="fail on any validation or pair error")
    parser.add_argument("--mock", action="store_true", help="use deterministic in-process model mocks")
    parser.add_argument("--workers", type=int, help="worker threads for generation and judging")
    parser.add_argument("--no-heatmaps", action="store_true")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.corpus:
        cfg.corpus_dir = args.corpus
    if args.questions:
        cfg.questions_path = args.questions
    if args.out:
        cfg.output_dir = args.out
    if args.run_name:
        cfg.run_name = args.run_name
    if args.center_map:
        cfg.center_map = args.center_map
    if args.strict:
        cfg.strict = True
    if args.mock:
        cfg.mock = True
    if args.workers:
        cfg.workers = args.workers
    if args.no_heatmaps:
        cfg.heatmaps = False
    cfg.models = ModelConfig.from_env(cfg.models)
    if args.verb == "run":
        if args.stages:
            cfg.stages = tuple(s.strip() for s in args.stages.split(",") if s.strip())
    else:
        cfg.stages = (args.verb,)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        bad = [s for s in cfg.stages if s not in STAGES]
        if bad:
            print(f"unknown stage(s): {', '.join(bad)}", file=sys.stderr)
            return 1
        report = run_pipeline(cfg)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary = {name: {k: v for k, v in res.items() if not isinstance(v, (list, dict))}
               for name, res in report["stages"].items()}
    print(json.dumps({"run_dir": str(cfg.run_dir), "exit_code": report["exit_code"], "stages": summary},
                     indent=2))
    return report["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
