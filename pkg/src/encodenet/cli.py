"""``encodenet`` command-line entry point.

Human-readable progress goes to stdout; failures are written to stderr as
one JSON object per line and the process exits non-zero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, EncodeNetError, PrerequisiteError
from .pipeline import STAGES, Pipeline, run_ablation

RUN_DIR_ENV = "ENCODENET_RUN_DIR"
STAGE_COMMANDS = {
    "train-baseline": "baseline",
    "cluster": "cluster",
    "rank": "rank",
    "train-cae": "cae",
    "assemble": "assemble",
    "train-head": "head",
}
COMMANDS = tuple(STAGE_COMMANDS) + ("ablate", "report")
EXIT_FAILURE, EXIT_USAGE, EXIT_PREREQ, EXIT_CONFIG = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="encodenet", description="Converting-autoencoder training pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML pipeline config (defaults are used when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.cae.epochs=10")
    parser.add_argument("--run-dir", help=f"run directory (default: ${RUN_DIR_ENV} or ./runs)")
    parser.add_argument("--seed", type=int, help="seed for single-stage commands (default: first configured seed)")
    parser.add_argument("--force", action="store_true", help="recompute even if the stage already completed")
    return parser


def _emit_error(kind, message, command=None, code=EXIT_FAILURE):
    print(json.dumps({"error": kind, "message": message, "command": command}), file=sys.stderr)
    return code


def _report(cfg, run_dir, seed):
    from .report import render_conversion_grid, write_report

    grid = None
    pipe = Pipeline(cfg.with_target_mode("representative_clustered"), run_dir, auto=False)
    try:
        cae = pipe.run("cae", seed) if pipe.store.lookup("cae", pipe.key("cae", seed)) else None
        rank = pipe.run("rank", seed) if cae is not None else None
    except PrerequisiteError:
        cae = None
    if cae is not None:
        pairs = rank.extra["pairs"]
        reps = sorted(set(pairs.targets.tolist()))[:4]
        others = [int(i) for i in pairs.inputs if int(i) not in reps][:4]
        idx = np.array(reps + others)
        grid, per_row = render_conversion_grid(cae.net, pairs.data.images[pairs.inputs[idx]],
                                               pairs.data.images[pairs.targets[idx]],
                                               Path(run_dir) / "report" / "conversion_grid.png")
        print(f"conversion grid: {grid} (per-row MSE {np.round(per_row, 5).tolist()})")
    return write_report(run_dir, grid=grid)


def execute(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _emit_error("UsageError", str(exc), code=EXIT_USAGE)
    try:
        cfg = load_config(args.config, args.overrides)
        run_dir = Path(args.run_dir or os.environ.get(RUN_DIR_ENV) or "runs")
        seed = cfg.seeds[0] if args.seed is None else args.seed
        if args.command in STAGE_COMMANDS:
            stage = STAGE_COMMANDS[args.command]
            pipe = Pipeline(cfg, run_dir, auto=False, force={stage} if args.force else (), log=print)
            done = not args.force and pipe.store.lookup(stage, pipe.key(stage, seed)) is not None
            result = pipe.run(stage, seed)
            verb = "up to date" if done else "done"
            summary = {k: v for k, v in result.extra.items() if isinstance(v, (int, float, str, bool))}
            print(f"{args.command} (seed {seed}): {verb} -> {result.dir}  {json.dumps(summary, sort_keys=True)}")
        elif args.command == "ablate":
            table = run_ablation(cfg, run_dir, log=print, force=STAGES if args.force else ())
            for row, v in table.rows.items():
                print(f"{row:28s} median accuracy {v['median_accuracy']}")
            print(f"ordering holds: {table.ordering_ok}; table: {run_dir / 'ablation' / 'ablation.json'}")
        else:
            path = _report(cfg, run_dir, seed)
            print(f"report: {path}")
    except PrerequisiteError as exc:
        return _emit_error("PrerequisiteError", str(exc), args.command, EXIT_PREREQ)
    except ConfigError as exc:
        return _emit_error("ConfigError", str(exc), args.command, EXIT_CONFIG)
    except (EncodeNetError, OSError) as exc:
        return _emit_error(type(exc).__name__, str(exc), args.command, EXIT_FAILURE)
    return 0


def main():
    sys.exit(execute())


if __name__ == "__main__":
    main()
