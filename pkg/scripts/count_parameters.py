#!/usr/bin/env python3
"""Print the layer plan and trainable parameter count of a preset's network."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from anatomy_completion.config import load_experiment
from anatomy_completion.network import PARAMETER_RANGE, expected_parameter_count, layer_plan


def main() -> None:
    parser = argparse.ArgumentParser(description="Closed-form parameter accounting for a preset.")
    parser.add_argument("--preset", default="dae_agg_res", help="Preset in config/experiments.json.")
    args = parser.parse_args()

    dae = load_experiment(preset=args.preset).dae
    k3 = dae.kernel_size**3
    for idx, spec in enumerate(layer_plan(dae), start=1):
        params = k3 * spec.in_channels * spec.out_channels + spec.out_channels
        print(f"{idx:2d} {spec.kind:<5} {spec.in_channels:>4} -> {spec.out_channels:<4} {params:>12,}")
    total = expected_parameter_count(dae)
    print(f"Total: {total:,} trainable parameters")
    if dae.is_canonical:
        lo, hi = PARAMETER_RANGE
        print(f"Canonical range {lo:,}..{hi:,}: {'ok' if lo <= total <= hi else 'outside'}")


if __name__ == "__main__":
    main()
