"""Command-line interface.

    tumorctrl simulate|optimize|verify|sweep-kappa|threshold \
        --config <path> [--out <dir>] [--command-override <cmd>]

Exit codes: 0 success, 1 check failure, 2 config error.
"""

from __future__ import annotations

import argparse
import sys

from .runner import COMMANDS, ConfigError, load_config, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tumorctrl",
        description="Sparse optimal control of a tumor-growth phase-field "
                    "system: simulate, optimize, verify.")
    p.add_argument("command", choices=COMMANDS,
                   help="command to run (overrides the config's run.command)")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", default="runs", help="output directory root")
    p.add_argument("--command-override", default=None, choices=COMMANDS,
                   help="replace the positional command (scripting hook)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command_override or args.command
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        for issue in exc.issues:
            print(f"config error: {issue}", file=sys.stderr)
        return 2
    # the positional command wins over the file's run.command
    values = tuple((sk, command if sk == ("run", "command") else v)
                   for sk, v in cfg.values)
    cfg = type(cfg)(values)
    try:
        manifest = run(cfg, args.out)
    except ConfigError as exc:
        for issue in exc.issues:
            print(f"config error: {issue}", file=sys.stderr)
        return 2
    print(f"{command}: wrote {len(manifest.artifacts)} artifacts to "
          f"{manifest.out_dir} ({manifest.elapsed_s:.2f}s)")
    if not manifest.passed:
        print("verification checks FAILED", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
