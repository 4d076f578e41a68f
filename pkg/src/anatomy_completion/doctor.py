"""Lightweight environment checks to make the CLI easier to use."""

from __future__ import annotations

import platform
import sys
from pathlib import Path
from typing import Optional

from . import PROJECT_ROOT
from .config import load_presets, resolve_config_path
from .corpus import load_manifest
from .errors import CompletionError
from .paths import RunPaths
from .utils import package_versions, select_device

__all__ = ["doctor"]

MIN_PYTHON = (3, 9)


def _rel(path: Path) -> Path:
    try:
        return path.relative_to(PROJECT_ROOT)
    except ValueError:
        return path


def _check_run(paths: RunPaths, verbose: bool) -> int:
    issues = 0
    print(f"\nRun: {_rel(paths.root)}")
    if not paths.root.exists():
        print(f"  run dir: missing — run `anatomy-complete init --run {_rel(paths.root)}`")
        return 1

    if paths.manifest_path.exists():
        try:
            manifest = load_manifest(paths.manifest_path)
        except CompletionError as exc:
            issues += 1
            print(f"  manifest: broken ({exc})")
        else:
            print(
                f"  manifest: {len(manifest.pairs)} pair(s), {len(manifest.subjects('train'))} train / "
                f"{len(manifest.subjects('test'))} test subject(s)"
            )
            if manifest.skipped:
                print(f"  skipped subjects: {', '.join(sorted(manifest.skipped))}")
    else:
        issues += 1
        print(f"  manifest: missing ({_rel(paths.manifest_path)}) — run `anatomy-complete synth` or `prepare`")

    checkpoints = sorted(paths.checkpoints_dir.glob("*.pt")) if paths.checkpoints_dir.exists() else []
    if checkpoints:
        print(f"  checkpoints: {len(checkpoints)} file(s) in {_rel(paths.checkpoints_dir)}")
    elif verbose:
        print("  checkpoints: none yet")
    return issues


def doctor(*, config_path: Path, run_dir: Optional[Path] = None, verbose: bool = False) -> int:
    """Print environment status and return the number of detected issues."""

    issues = 0
    version = sys.version_info
    print(f"Python: {platform.python_version()} ({sys.executable})")
    if version[:2] < MIN_PYTHON:
        issues += 1
        print(f"  Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+ is required.")

    for name, found in package_versions().items():
        if found == "missing":
            issues += 1
            print(f"{name}: not installed. Install with `python3 -m pip install -e .`")
        elif verbose:
            print(f"{name}: {found}")

    try:
        print(f"Device: {select_device()}")
    except (ImportError, RuntimeError) as exc:
        issues += 1
        print(f"Device: unavailable ({exc})")

    cfg_path = resolve_config_path(config_path)
    print(f"Config: {_rel(cfg_path)}")
    if not cfg_path.exists():
        issues += 1
        print("  Missing config. Run `anatomy-complete init --run <dir>` to get started.")
    else:
        try:
            presets = load_presets(cfg_path)
        except CompletionError as exc:
            issues += 1
            print(f"  Could not parse config: {exc}")
        else:
            print(f"  presets: {', '.join(presets.names())}")

    if run_dir is not None:
        issues += _check_run(RunPaths(run_dir), verbose)
    return issues
