"""Command line entry point.

Subcommands mirror the harness functions: train runs every configured
seed, eval scores a checkpoint greedily, curves averages seed metrics
into smoothed learning curves, and validate checks a run file without
executing anything.  Failures are written to stderr as one JSON object
and mapped to exit codes: 2 for configuration problems, 3 for missing
or unusable checkpoints, 1 for anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .errors import (
    CheckpointCorrupt,
    CheckpointMissing,
    ConfigInvalid,
    SpacearmError,
)


def _resolve_config(spec: str) -> harness.RunConfig:
    path = Path(spec)
    if not path.exists() and "/" not in spec and not spec.endswith(".yaml"):
        path = harness.builtin_run_config_path(spec)
    return harness.load_run_config(path)


def _cmd_train(args) -> int:
    config = _resolve_config(args.config)
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.split(","))
        config = dataclasses.replace(
            config,
            training=dataclasses.replace(config.training, seeds=seeds),
        )
    root = Path(args.output) if args.output else harness.default_output_root()
    dirs = harness.run_training(config, root)
    for d in dirs:
        print(d)
    return 0


def _cmd_eval(args) -> int:
    config = _resolve_config(args.config)
    result = harness.run_eval(
        config,
        args.checkpoint,
        episodes=args.episodes,
        seed_base=args.seed_base,
    )
    if not args.per_episode:
        result = {k: v for k, v in result.items() if k != "per_episode"}
    print(json.dumps(result, sort_keys=True, indent=2))
    return 0


def _cmd_curves(args) -> int:
    harness.emit_curves(args.run_dirs, args.out, window=args.window)
    print(args.out)
    return 0


def _cmd_validate(args) -> int:
    config = _resolve_config(args.config)
    print(
        json.dumps(
            {
                "ok": True,
                "run_name": config.run_name,
                "task": config.task,
                "model": config.model,
                "episodes": config.training.episodes,
                "seeds": list(config.training.seeds),
            },
            sort_keys=True,
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spacearm",
        description="train and evaluate free-floating capture policies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train all seeds of a run config")
    train.add_argument("--config", required=True, help="run file or built-in name")
    train.add_argument("--output", help="output root (default $SPACEARM_OUTPUT_ROOT or ./runs)")
    train.add_argument("--seeds", help="comma-separated override, e.g. 0,1,2")
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("--config", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--seed-base", type=int, dest="seed_base")
    ev.add_argument("--per-episode", action="store_true", dest="per_episode")
    ev.set_defaults(func=_cmd_eval)

    curves = sub.add_parser("curves", help="average seed metrics into curves")
    curves.add_argument("run_dirs", nargs="+", help="seed directories")
    curves.add_argument("--out", required=True)
    curves.add_argument("--window", type=int, default=harness.CURVE_WINDOW)
    curves.set_defaults(func=_cmd_curves)

    val = sub.add_parser("validate", help="check a run file and exit")
    val.add_argument("--config", required=True)
    val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        _report(exc)
        return 2
    except (CheckpointMissing, CheckpointCorrupt) as exc:
        _report(exc)
        return 3
    except SpacearmError as exc:
        _report(exc)
        return 1


def _report(exc: Exception) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
