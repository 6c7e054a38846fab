"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, ``3 + N`` failure in stage N
where stages are numbered simulate=0, train=1, detect=2, reject=3,
optimize=4, evaluate=5.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import PipelineConfig, load_config
from .errors import ConfigError, StageError
from .pipeline import STAGES, SWEEP_PARAMETERS, run_pipeline, run_stage, run_sweep

EXIT_OK = 0
EXIT_CONFIG = 2
STAGE_EXIT_BASE = 3


def stage_exit_code(stage: str) -> int:
    return STAGE_EXIT_BASE + STAGES.index(stage)


def _parse_value(parameter: str, text: str):
    if parameter == "covariance_mode":
        return text
    return int(text) if parameter == "K" else float(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdnslam", description="Pose-graph SLAM pipeline on synthetic worlds.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (defaults used when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--output", help="output directory (overrides config)")

    for name in STAGES:
        common(sub.add_parser(name, help=f"run the {name} stage in the output directory"))
    sp = sub.add_parser("pipeline", help="run all stages")
    common(sp)
    sp.add_argument("--stage", choices=STAGES, help="stop after this stage")
    sp = sub.add_parser("sweep", help="one pipeline run per parameter value")
    common(sp)
    sp.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    sp.add_argument("--values", required=True, nargs="+")
    return p


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = cfg.with_seed(args.seed)
    if args.output:
        cfg = replace(cfg, output_dir=args.output)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "sweep":
            values = [_parse_value(args.parameter, v) for v in args.values]
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "pipeline":
            metrics = run_pipeline(cfg, stop_after=args.stage)
            if metrics:
                gain = metrics["gain_percent"]
                gain = "n/a" if gain is None else f"{gain:.1f}%"
                print(f"ATE {metrics['ate_m']:.4f} m  gain {gain}  -> {cfg.output_dir}")
        elif args.command == "sweep":
            print(run_sweep(cfg, args.parameter, values))
        else:
            run_stage(args.command, cfg)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return stage_exit_code(e.stage)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
