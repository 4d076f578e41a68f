"""Centralized helpers for resolving the directory layout of a run."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import PROJECT_ROOT


@dataclass
class RunPaths:
    """Resolve filesystem locations under one run directory."""

    root: Path

    def __post_init__(self) -> None:
        root = Path(self.root).expanduser()
        if not root.is_absolute():
            root = (PROJECT_ROOT / root).resolve()
        self.root = root

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def manifest_path(self) -> Path:
        return self.corpus_dir / "manifest.json"

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def renders_dir(self) -> Path:
        return self.root / "renders"

    @property
    def config_path(self) -> Path:
        return self.root / "experiment.json"

    def ensure(self) -> None:
        for path in (self.corpus_dir, self.checkpoints_dir, self.reports_dir, self.renders_dir):
            path.mkdir(parents=True, exist_ok=True)


def checkpoint_path(directory: Path, experiment: str, epoch: int | None = None) -> Path:
    """Final checkpoint of ``experiment``, or its intermediate one for ``epoch``."""

    if epoch is None:
        return Path(directory) / f"{experiment}.pt"
    return Path(directory) / f"{experiment}_epoch{epoch:04d}.pt"


def record_path(directory: Path, experiment: str) -> Path:
    return Path(directory) / f"{experiment}.record.json"
