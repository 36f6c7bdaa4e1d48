"""``trajkit <command> --config FILE [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys

from trajkit.harness.commands import COMMANDS
from trajkit.harness.config import ConfigError, load_config, output_root
from trajkit.harness.corpus import MissingArtifact
from trajkit.policy.train import NumericalFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajkit", description="Scene corpus, reward cache, policy training and evaluation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="YAML run config (defaults apply when omitted)")
    p.add_argument("--out", default=None, help="output root (else $TRAJKIT_OUT, else ./trajkit_out)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        result = COMMANDS[args.command](cfg, output_root(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    summary = {k: v for k, v in result.items() if k not in ("scenes", "split", "tables", "cells")}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
