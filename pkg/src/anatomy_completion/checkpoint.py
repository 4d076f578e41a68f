"""Self-describing checkpoint files."""

from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from .errors import DataError, MissingFileError
from .network import DaeConfig, DenoisingAutoEncoder, build_dae
from .objective import LossConfig
from .utils import atomic_output

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class Checkpoint:
    model: DenoisingAutoEncoder
    dae_config: DaeConfig
    loss_config: LossConfig
    manifest_checksum: str
    seed: int
    experiment: str
    epoch: int
    config_hash: str
    path: Optional[Path] = None

    @property
    def digest(self) -> str:
        """SHA-256 of the checkpoint file (empty when not loaded from disk)."""

        if self.path is None:
            return ""
        return hashlib.sha256(Path(self.path).read_bytes()).hexdigest()


def save_checkpoint(
    path: Path,
    model: DenoisingAutoEncoder,
    *,
    loss_config: LossConfig,
    manifest_checksum: str,
    seed: int,
    experiment: str,
    epoch: int,
    config_hash: str = "",
) -> Path:
    """Write weights plus everything needed to rebuild and audit the model."""

    payload: Dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "dae_config": model.config.to_dict(),
        "loss_config": loss_config.to_dict(),
        "manifest_checksum": manifest_checksum,
        "seed": int(seed),
        "experiment": experiment,
        "epoch": int(epoch),
        "config_hash": config_hash,
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    path = Path(path)
    with atomic_output(path) as tmp:
        tmp.write_bytes(buffer.getvalue())
    logger.debug("Saved checkpoint %s (epoch %d)", path, epoch)
    return path


def load_checkpoint(path: Path, device: Optional[torch.device] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"Unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a format-{CHECKPOINT_FORMAT} checkpoint")
    dae_config = DaeConfig.from_dict(payload["dae_config"])
    model = build_dae(dae_config, seed=int(payload.get("seed", 0)))
    model.load_state_dict(payload["state_dict"])
    if device is not None:
        model.to(device)
    model.eval()
    return Checkpoint(
        model=model,
        dae_config=dae_config,
        loss_config=LossConfig.from_dict(payload["loss_config"]),
        manifest_checksum=str(payload.get("manifest_checksum", "")),
        seed=int(payload.get("seed", 0)),
        experiment=str(payload.get("experiment", "")),
        epoch=int(payload.get("epoch", 0)),
        config_hash=str(payload.get("config_hash", "")),
        path=path,
    )


__all__ = ["Checkpoint", "load_checkpoint", "save_checkpoint"]
