"""Training loop for the completion experiments and the four-way ablation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .config import ABLATION_ORDER, ExperimentConfig, config_hash, resolve_config_path
from .corpus import TEST, TRAIN, CorpusManifest, PairRecord, load_manifest
from .errors import ConfigError, ManifestMismatchError, NonFiniteLossError
from .network import DaeConfig, DenoisingAutoEncoder, build_dae, input_array
from .objective import compute_loss, dice_coefficient, multiclass_loss
from .paths import checkpoint_path, record_path
from .utils import select_device, write_json

logger = logging.getLogger(__name__)

DATA_STREAM = 0xDA7A


class PairDataset(Dataset):
    """(input, target) tensors for the pairs of one split, at network resolution."""

    def __init__(self, manifest: CorpusManifest, records: Sequence[PairRecord], dae: DaeConfig):
        self.manifest = manifest
        self.records = list(records)
        self.dae = dae
        self._cache: Dict[int, Tuple[torch.Tensor, torch.Tensor]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        cached = self._cache.get(index)
        if cached is None:
            pair = self.manifest.pair(self.records[index])
            x = torch.from_numpy(input_array(pair.incomplete, self.dae))
            y = torch.from_numpy(input_array(pair.complete, self.dae))
            cached = self._cache[index] = (x, y)
        return cached

    def subject_groups(self) -> List[List[int]]:
        """Dataset indices grouped by subject, variants in order."""

        groups: Dict[str, List[int]] = {}
        for idx, rec in enumerate(self.records):
            groups.setdefault(rec.subject_id, []).append(idx)
        return [sorted(idxs, key=lambda i: self.records[i].variant_id) for _, idxs in sorted(groups.items())]


def epoch_batches(
    dataset: PairDataset, *, aggregated: bool, batch_size: int, seed: int, epoch: int
) -> List[List[int]]:
    """Batches of dataset indices for one epoch.

    Aggregated batches hold every variant of ``batch_size`` subjects;
    otherwise instances are shuffled independently and chunked.
    """

    rng = np.random.default_rng([int(seed), DATA_STREAM, int(epoch)])
    if aggregated:
        groups = dataset.subject_groups()
        order = rng.permutation(len(groups))
        batches = []
        for start in range(0, len(order), batch_size):
            batch: List[int] = []
            for g in order[start : start + batch_size]:
                batch.extend(groups[int(g)])
            batches.append(batch)
        return batches
    order = [int(i) for i in rng.permutation(len(dataset))]
    return [order[start : start + batch_size] for start in range(0, len(order), batch_size)]


@dataclass
class TrainingRecord:
    experiment: str
    preset: str
    config_hash: str
    seed: int
    losses: List[float] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    checkpoint: str = ""
    manifest_checksum: str = ""
    monitor: Dict[int, float] = field(default_factory=dict)

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "preset": self.preset,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "epochs": len(self.losses),
            "losses": list(self.losses),
            "wall_clock_seconds": self.wall_clock_seconds,
            "checkpoint": self.checkpoint,
            "manifest_checksum": self.manifest_checksum,
            "monitor": {str(k): v for k, v in sorted(self.monitor.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainingRecord":
        return cls(
            experiment=data["experiment"],
            preset=data.get("preset", data["experiment"]),
            config_hash=data.get("config_hash", ""),
            seed=int(data.get("seed", 0)),
            losses=[float(v) for v in data.get("losses", [])],
            wall_clock_seconds=float(data.get("wall_clock_seconds", 0.0)),
            checkpoint=data.get("checkpoint", ""),
            manifest_checksum=data.get("manifest_checksum", ""),
            monitor={int(k): float(v) for k, v in (data.get("monitor") or {}).items()},
        )


def check_manifest(config: ExperimentConfig, manifest: CorpusManifest) -> None:
    """Refuse to train when the corpus cannot feed the configured network."""

    train_subjects = manifest.subjects(TRAIN)
    if not train_subjects:
        raise ManifestMismatchError("Corpus has no training subjects")
    shape = manifest.target_shape
    if shape is None and manifest.pairs:
        shape = manifest.pair(manifest.pairs[0]).complete.shape
    if tuple(shape or ()) != config.dae.input_shape:
        raise ManifestMismatchError(f"Corpus volumes are {shape}, network input is {config.dae.input_shape}")
    if not config.dae.is_binary and manifest.num_classes > config.dae.num_classes:
        raise ManifestMismatchError(
            f"Corpus has {manifest.num_classes} label channels, network outputs {config.dae.num_classes}"
        )
    if config.aggregated:
        expected = manifest.policy.variants_per_subject
        short = [sid for sid, recs in manifest.groups(TRAIN).items() if len(recs) != expected]
        if short:
            raise ManifestMismatchError(f"Subjects {short} lack some of their {expected} variants")


def completion_dsc(model: DenoisingAutoEncoder, dataset: PairDataset, device: torch.device) -> float:
    """Mean completion DSC at network resolution (macro over classes for multi-class)."""

    if len(dataset) == 0:
        return float("nan")
    cfg = model.config
    scores: List[float] = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for idx in range(len(dataset)):
            x, y = dataset[idx]
            probs = model(x[None].to(device))[0].cpu()
            if cfg.is_binary:
                if cfg.residual:
                    probs = torch.clamp(x + probs, 0.0, 1.0)
                pred = (probs >= cfg.threshold).to(torch.float64)
                scores.append(float(dice_coefficient(y.to(torch.float64), pred)))
            else:
                labels = probs.argmax(dim=0)
                pred = torch.nn.functional.one_hot(labels, cfg.num_classes).permute(3, 0, 1, 2).to(torch.float64)
                scores.append(1.0 - float(multiclass_loss(y.to(torch.float64), pred)))
    model.train(was_training)
    return float(np.mean(scores))


def _checkpoint_dir(config: ExperimentConfig, manifest: CorpusManifest, checkpoint_dir: Optional[Path]) -> Path:
    if checkpoint_dir is not None:
        return Path(checkpoint_dir)
    if manifest.root is not None:
        return manifest.root.parent / "checkpoints"
    raise ConfigError("No checkpoint directory given and the corpus is not stored on disk")


def train(
    config: ExperimentConfig,
    *,
    manifest: Optional[CorpusManifest] = None,
    checkpoint_dir: Optional[Path] = None,
    device: Optional[torch.device] = None,
    progress: Optional[bool] = None,
) -> TrainingRecord:
    """Train one experiment for a fixed number of epochs; deterministic given the seed.

    Deterministic kernels are switched on for the run and the caller's
    setting is restored afterwards.
    """

    enabled = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        return _train(config, manifest=manifest, checkpoint_dir=checkpoint_dir, device=device, progress=progress)
    finally:
        torch.use_deterministic_algorithms(enabled, warn_only=warn_only)


def _train(
    config: ExperimentConfig,
    *,
    manifest: Optional[CorpusManifest] = None,
    checkpoint_dir: Optional[Path] = None,
    device: Optional[torch.device] = None,
    progress: Optional[bool] = None,
) -> TrainingRecord:
    config.validate()
    if manifest is None:
        if not config.corpus:
            raise ConfigError("Experiment config does not name a corpus manifest")
        manifest = load_manifest(resolve_config_path(config.corpus))
    check_manifest(config, manifest)
    out_dir = _checkpoint_dir(config, manifest, checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = device or select_device()
    digest = config_hash(config)
    manifest_checksum = manifest.checksum()

    model = build_dae(config.dae, seed=config.seed).to(device)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
    )
    train_set = PairDataset(manifest, manifest.records(TRAIN), config.dae)
    monitor_set = PairDataset(manifest, manifest.records(TEST), config.dae) if config.monitor_every else None
    record = TrainingRecord(
        experiment=config.name.value,
        preset=config.preset,
        config_hash=digest,
        seed=config.seed,
        manifest_checksum=manifest_checksum,
    )

    def _save(epoch: int, path: Path) -> Path:
        return save_checkpoint(
            path,
            model,
            loss_config=config.loss,
            manifest_checksum=manifest_checksum,
            seed=config.seed,
            experiment=config.preset,
            epoch=epoch,
            config_hash=digest,
        )

    logger.info(
        "Training %s: %d instance(s) from %d subject(s), %d epoch(s)",
        config.preset,
        len(train_set),
        len(manifest.subjects(TRAIN)),
        config.epochs,
    )
    if progress is None:
        progress = logger.isEnabledFor(logging.INFO)
    started = time.perf_counter()
    for epoch in tqdm(range(1, config.epochs + 1), desc=config.preset, unit="epoch", disable=not progress):
        batches = epoch_batches(
            train_set,
            aggregated=config.aggregated,
            batch_size=config.effective_batch_size,
            seed=config.seed,
            epoch=epoch,
        )
        loader = DataLoader(train_set, batch_sampler=batches, num_workers=config.num_workers)
        epoch_losses: List[float] = []
        for batch_idx, (inputs, targets) in enumerate(loader):
            inputs, targets = inputs.to(device), targets.to(device)
            loss = compute_loss(model, inputs, targets, config.loss)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, batch_idx, value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(value)
        record.losses.append(float(np.mean(epoch_losses)))
        logger.debug("Epoch %d/%d loss %.6f", epoch, config.epochs, record.losses[-1])
        if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch < config.epochs:
            _save(epoch, checkpoint_path(out_dir, config.preset, epoch))
        if monitor_set is not None and epoch % config.monitor_every == 0:
            record.monitor[epoch] = completion_dsc(model, monitor_set, device)
            logger.info("Epoch %d held-out DSC %.4f", epoch, record.monitor[epoch])
    record.wall_clock_seconds = round(time.perf_counter() - started, 3)

    final = _save(config.epochs, checkpoint_path(out_dir, config.preset))
    record.checkpoint = str(final)
    write_json(record.to_dict(), record_path(out_dir, config.preset))
    if record.losses:
        logger.info("Finished %s: final loss %.6f", config.preset, record.losses[-1])
    return record


@dataclass
class AblationSuite:
    records: Dict[str, TrainingRecord] = field(default_factory=dict)
    failures: Dict[str, str] = field(default_factory=dict)
    manifest_checksum: str = ""

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "manifest_checksum": self.manifest_checksum,
            "partial": self.partial,
            "records": {name: rec.to_dict() for name, rec in self.records.items()},
            "failures": dict(self.failures),
        }


def run_ablation_suite(
    base: ExperimentConfig,
    *,
    manifest: Optional[CorpusManifest] = None,
    checkpoint_dir: Optional[Path] = None,
    device: Optional[torch.device] = None,
    progress: Optional[bool] = None,
) -> AblationSuite:
    """Train all four binary methods from the same seed and corpus."""

    if manifest is None:
        if not base.corpus:
            raise ConfigError("Experiment config does not name a corpus manifest")
        manifest = load_manifest(resolve_config_path(base.corpus))
    missing = [t for t in (0.10, 0.20, 0.40) if t not in manifest.policy.thresholds]
    if missing:
        logger.warning("Corpus lacks thresholds %s; some test sets will be empty", missing)
    out_dir = _checkpoint_dir(base, manifest, checkpoint_dir)
    suite = AblationSuite(manifest_checksum=manifest.checksum())
    for name in ABLATION_ORDER:
        variant = base.for_variant(name)
        try:
            suite.records[name.value] = train(
                variant, manifest=manifest, checkpoint_dir=out_dir, device=device, progress=progress
            )
        except Exception as exc:  # noqa: BLE001
            logger.exception("Ablation member %s failed", name.value)
            suite.failures[name.value] = f"{type(exc).__name__}: {exc}"
    write_json(suite.to_dict(), out_dir / "suite.json")
    return suite


__all__ = [
    "AblationSuite",
    "PairDataset",
    "TrainingRecord",
    "check_manifest",
    "completion_dsc",
    "epoch_batches",
    "run_ablation_suite",
    "train",
]
