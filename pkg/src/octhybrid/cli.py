"""Command-line entry point: ``octhybrid <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 precondition or refusal.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import commands
from .config import RunConfig
from .errors import ConfigError, OctHybridError, PreconditionError
from .workflow import MODEL_ARMS

log = logging.getLogger("octhybrid")


def _global_flags(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d, help="JSON run config")
    parser.add_argument("--seed", type=int, default=d, help="master seed (u64)")
    parser.add_argument("--out", type=Path, default=d, help="output directory")
    parser.add_argument("--force", action="store_true", default=d if suppress else False,
                        help="overwrite a non-empty output directory")
    parser.add_argument("--threads", type=int, default=d if suppress else 1,
                        help="worker threads (outputs do not depend on this)")


def build_parser():
    parser = argparse.ArgumentParser(prog="octhybrid", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    # global flags are accepted after the subcommand as well
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("gen", parents=[common], help="generate a synthetic cohort bundle into --out")
    p = sub.add_parser("maps", parents=[common], help="process a bundle's scans into grids")
    p.add_argument("bundle", type=Path)
    p = sub.add_parser("train", parents=[common], help="train one model arm into --out/models/<arm>")
    p.add_argument("bundle", type=Path)
    p.add_argument("arm", choices=MODEL_ARMS)
    p = sub.add_parser("eval", parents=[common], help="evaluate models on the test fold")
    p.add_argument("bundle", type=Path)
    p.add_argument("models", type=Path, nargs="*",
                   help="model directories (default: every directory under --out/models)")
    p = sub.add_parser("report", parents=[common], help="write report.md for a run directory")
    p.add_argument("run_dir", type=Path, nargs="?", help="defaults to --out")
    return parser


def run(args) -> int:
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    cfg = RunConfig.load(args.config, args.seed)
    ctx = commands.Context(cfg=cfg, out=args.out, force=args.force, threads=args.threads,
                           log=log.info)
    with threadpool_limits(limits=args.threads):
        if args.command == "gen":
            path = commands.cmd_gen(ctx)
        elif args.command == "maps":
            path = commands.cmd_maps(ctx, args.bundle)
        elif args.command == "train":
            path = commands.cmd_train(ctx, args.bundle, args.arm)
        elif args.command == "eval":
            path = commands.cmd_eval(ctx, args.bundle, args.models)
        else:
            path = commands.cmd_report(ctx, args.run_dir)
    print(path)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (PreconditionError, ConfigError) as exc:
        print(f"octhybrid {args.command}: refused: {exc}", file=sys.stderr)
        return 2
    except OctHybridError as exc:
        print(f"octhybrid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"octhybrid {args.command}: error: {exc}", file=sys.stderr)
        return 1
