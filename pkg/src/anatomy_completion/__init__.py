"""Shape-completion tooling for whole-body anatomy segmentations."""

from __future__ import annotations

import os
from pathlib import Path

__all__ = ["__version__", "PROJECT_ROOT"]

__version__ = "0.1.0"

ROOT_MARKERS = ("config/experiments.json", "config/phantom.json")


def _has_config(base: Path) -> bool:
    return any((base / marker).is_file() for marker in ROOT_MARKERS)


def _discover_project_root() -> Path:
    """Directory that holds ``config/`` for presets and the phantom layout.

    ``ANATOMY_COMPLETION_HOME`` wins; otherwise the nearest parent of the CWD
    with either config file, then the source checkout, then the CWD itself
    (an installed package with no project on disk).
    """

    env_home = os.environ.get("ANATOMY_COMPLETION_HOME")
    if env_home:
        return Path(env_home).expanduser().resolve()

    cwd = Path.cwd().resolve()
    for base in (cwd, *cwd.parents):
        if _has_config(base):
            return base

    checkout = Path(__file__).resolve().parents[2]
    return checkout if _has_config(checkout) else cwd


PROJECT_ROOT = _discover_project_root()
