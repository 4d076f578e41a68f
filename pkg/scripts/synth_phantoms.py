#!/usr/bin/env python3
"""CLI wrapper to generate a phantom completion corpus."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from anatomy_completion.cli import dispatch


def main() -> int:
    parser = argparse.ArgumentParser(description="Generate phantoms and write a corpus under <run>/corpus.")
    parser.add_argument("--run", default="runs/phantom", help="Run directory (relative to the project root).")
    parser.add_argument("--count", type=int, default=10, help="Number of phantom subjects.")
    parser.add_argument("--seed", type=int, default=0, help="Phantom and removal seed.")
    parser.add_argument(
        "--preset",
        default="phantom_agg_res",
        help="Preset in config/experiments.json supplying the removal policy and grid.",
    )
    args = parser.parse_args()
    return dispatch(
        ["synth", "--run", args.run, "--count", str(args.count), "--seed", str(args.seed), "--preset", args.preset]
    )


if __name__ == "__main__":
    sys.exit(main())
