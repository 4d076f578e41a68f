"""Shared utilities used across the completion pipeline."""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterable, Iterator, Mapping, Optional

from .errors import ConfigError

if TYPE_CHECKING:
    import torch

logger = logging.getLogger(__name__)

DEVICE_ENV_VARS = ("ANATOMY_COMPLETION_DEVICE",)

TRACKED_PACKAGES = ("numpy", "scipy", "torch", "nibabel", "pandas", "matplotlib", "tqdm")


def select_device(preferred: Optional[str] = None) -> "torch.device":
    """Pick a torch device via explicit argument, env vars, or CUDA availability."""

    import torch

    if preferred:
        return torch.device(preferred)
    for env_var in DEVICE_ENV_VARS:
        val = os.environ.get(env_var)
        if val:
            return torch.device(val.strip())
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def check_keys(data: Mapping[str, Any], known: Iterable[str], where: str) -> None:
    """Reject unknown keys, suggesting the closest known key."""

    known = list(known)
    for key in data:
        if key in known:
            continue
        hint = difflib.get_close_matches(key, known, n=1)
        suffix = f" Did you mean '{hint[0]}'?" if hint else ""
        raise ConfigError(f"Unknown key '{key}' in {where}.{suffix}")


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators so digests are stable."""

    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


@contextmanager
def atomic_output(path: Path) -> Iterator[Path]:
    """Yield a temp sibling of ``path`` and move it into place on success."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


@contextmanager
def atomic_directory(path: Path) -> Iterator[Path]:
    """Yield a temp directory that replaces ``path`` once the block succeeds."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        yield tmp
        if path.exists():
            backup = Path(tempfile.mkdtemp(prefix=f".{path.name}.old.", dir=path.parent))
            backup.rmdir()
            os.replace(path, backup)
            os.replace(tmp, path)
            shutil.rmtree(backup, ignore_errors=True)
        else:
            os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def write_json(data: Any, path: Path) -> Path:
    """Persist JSON with stable formatting through an atomic replace."""

    with atomic_output(path) as tmp:
        tmp.write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(path)


def package_versions() -> Dict[str, str]:
    versions: Dict[str, str] = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


def write_stamp(
    directory: Path,
    *,
    command: str,
    config_hash: str = "",
    seeds: Optional[Mapping[str, int]] = None,
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write ``stamp.json`` describing how the outputs in ``directory`` were made."""

    from . import __version__

    stamp: Dict[str, Any] = {
        "command": command,
        "config_hash": config_hash,
        "seeds": dict(seeds or {}),
        "versions": {"anatomy-completion": __version__, **package_versions()},
    }
    if extra:
        stamp.update(extra)
    return write_json(stamp, Path(directory) / "stamp.json")


def parse_shape(value: str) -> tuple:
    """Parse ``128`` or ``256,256,128`` into a 3-tuple of ints."""

    parts = [item.strip() for item in str(value).replace("x", ",").split(",") if item.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ConfigError(f"Expected a 3D shape, got '{value}'.")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"Expected integer shape components, got '{value}'.") from exc
    if any(s < 1 for s in shape):
        raise ConfigError(f"Shape components must be >= 1, got '{value}'.")
    return shape


__all__ = [
    "atomic_directory",
    "atomic_output",
    "canonical_json",
    "check_keys",
    "package_versions",
    "parse_shape",
    "select_device",
    "sha256_bytes",
    "sha256_file",
    "write_json",
    "write_stamp",
]
