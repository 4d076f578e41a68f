#!/usr/bin/env python3
"""CLI wrapper to train, evaluate, and compare the four binary methods."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from anatomy_completion.cli import dispatch


def main() -> int:
    parser = argparse.ArgumentParser(description="Run the ablation suite on an existing run directory.")
    parser.add_argument("--run", default="runs/phantom", help="Run directory holding corpus/manifest.json.")
    parser.add_argument(
        "--preset",
        default="phantom_agg_res",
        help="Preset the four methods are derived from.",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        help="Config override, e.g. --set epochs=5 (repeatable).",
    )
    args = parser.parse_args()
    argv = ["ablate", "--run", args.run, "--preset", args.preset]
    for item in args.overrides:
        argv += ["--set", item]
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
