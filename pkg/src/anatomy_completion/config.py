"""Configuration loading for completion experiments."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import PROJECT_ROOT
from .corpus import RemovalPolicy
from .errors import ConfigError, ConflictError
from .network import DaeConfig
from .objective import LossConfig, LossMapping
from .utils import canonical_json, check_keys, sha256_bytes, write_json

CONFIG_PATH = PROJECT_ROOT / "config" / "experiments.json"
SCHEMA_VERSION = 1


class ExperimentName(str, Enum):
    DAE_B = "dae_b"
    DAE_AGG = "dae_agg"
    DAE_RES = "dae_res"
    DAE_AGG_RES = "dae_agg_res"
    MULTICLASS_AGG = "multiclass_agg"


# (residual, aggregated) per binary method.
METHOD_FLAGS: Dict[ExperimentName, Tuple[bool, bool]] = {
    ExperimentName.DAE_B: (False, False),
    ExperimentName.DAE_AGG: (False, True),
    ExperimentName.DAE_RES: (True, False),
    ExperimentName.DAE_AGG_RES: (True, True),
}

ABLATION_ORDER = tuple(METHOD_FLAGS)


def resolve_config_path(path: Optional[str | Path]) -> Path:
    """Normalize a user-supplied config path against the working root."""

    if path is None or path == "":
        return CONFIG_PATH
    candidate = Path(path).expanduser()
    if not candidate.is_absolute():
        candidate = (PROJECT_ROOT / candidate).resolve()
    return candidate


@dataclass
class ExperimentConfig:
    name: ExperimentName
    dae: DaeConfig = field(default_factory=DaeConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 100
    learning_rate: float = 1e-4
    beta1: float = 0.3
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: Optional[int] = None
    seed: int = 0
    corpus: str = ""
    removal: RemovalPolicy = field(default_factory=RemovalPolicy)
    split_fraction: float = 0.8
    checkpoint_every: int = 0
    monitor_every: int = 0
    num_workers: int = 0
    preset: str = ""
    description: str = ""

    def __post_init__(self) -> None:
        self.name = ExperimentName(self.name)
        if not self.preset:
            self.preset = self.name.value

    @property
    def residual(self) -> bool:
        return self.dae.residual

    @property
    def aggregated(self) -> bool:
        return self.loss.aggregated

    @property
    def effective_batch_size(self) -> int:
        """Subject groups per step when aggregated, instances per step otherwise."""

        return self.batch_size or 1

    def validate(self) -> None:
        self.dae.validate()
        self.loss.validate()
        self.removal.validate()
        if (self.loss.mapping is LossMapping.RESIDUAL) != self.dae.residual:
            raise ConfigError(
                f"Loss mapping '{self.loss.mapping.value}' disagrees with dae.residual={self.dae.residual}"
            )
        if self.name is ExperimentName.MULTICLASS_AGG:
            if self.dae.is_binary:
                raise ConfigError("multiclass_agg needs dae.num_classes >= 2")
            if self.loss.mapping is not LossMapping.FULL or not self.loss.aggregated:
                raise ConfigError("multiclass_agg uses the full mapping with the aggregated loss")
        else:
            if not self.dae.is_binary:
                raise ConfigError(f"Experiment '{self.name.value}' is binary; set dae.num_classes=1")
            expected = METHOD_FLAGS[self.name]
            actual = (self.dae.residual, self.loss.aggregated)
            if actual != expected:
                raise ConfigError(
                    f"Experiment '{self.name.value}' requires (residual, aggregated)={expected}, got {actual}"
                )
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for key in ("beta1", "beta2"):
            value = getattr(self, key)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{key} must lie in [0, 1), got {value}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"split_fraction must lie strictly in (0, 1), got {self.split_fraction}")
        for key in ("checkpoint_every", "monitor_every", "num_workers"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")

    def for_variant(self, name: ExperimentName | str) -> "ExperimentConfig":
        """Copy of this config switched to another binary ablation method."""

        name = ExperimentName(name)
        if name not in METHOD_FLAGS:
            raise ConfigError(f"'{name.value}' is not a binary ablation method")
        residual, aggregated = METHOD_FLAGS[name]
        variant = copy.deepcopy(self)
        variant.name = name
        variant.preset = name.value
        variant.dae.residual = residual
        variant.loss.aggregated = aggregated
        variant.loss.mapping = LossMapping.RESIDUAL if residual else LossMapping.FULL
        return variant

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name.value,
            "preset": self.preset,
            "description": self.description,
            "dae": self.dae.to_dict(),
            "loss": self.loss.to_dict(),
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "corpus": self.corpus,
            "removal": self.removal.to_dict(),
            "split_fraction": self.split_fraction,
            "checkpoint_every": self.checkpoint_every,
            "monitor_every": self.monitor_every,
            "num_workers": self.num_workers,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        check_keys(data, ["schema_version", *cls.__dataclass_fields__], "experiment config")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"Unsupported schema_version {version}; expected {SCHEMA_VERSION}")
        if "name" not in data:
            raise ConfigError("Experiment config needs a 'name'")
        try:
            name = ExperimentName(data["name"])
        except ValueError as exc:
            choices = ", ".join(n.value for n in ExperimentName)
            raise ConfigError(f"Unknown experiment name '{data['name']}'; expected one of: {choices}") from exc
        batch_size = data.get("batch_size")
        return cls(
            name=name,
            dae=DaeConfig.from_dict(data.get("dae") or {}),
            loss=LossConfig.from_dict(data.get("loss") or {}),
            epochs=int(data.get("epochs", 100)),
            learning_rate=float(data.get("learning_rate", 1e-4)),
            beta1=float(data.get("beta1", 0.3)),
            beta2=float(data.get("beta2", 0.999)),
            adam_eps=float(data.get("adam_eps", 1e-8)),
            batch_size=int(batch_size) if batch_size is not None else None,
            seed=int(data.get("seed", 0)),
            corpus=str(data.get("corpus", "")),
            removal=RemovalPolicy.from_dict(data.get("removal") or {}),
            split_fraction=float(data.get("split_fraction", 0.8)),
            checkpoint_every=int(data.get("checkpoint_every", 0)),
            monitor_every=int(data.get("monitor_every", 0)),
            num_workers=int(data.get("num_workers", 0)),
            preset=str(data.get("preset", "")),
            description=str(data.get("description", "")),
        )


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON of the full config, optimizer defaults included."""

    return sha256_bytes(canonical_json(config.to_dict()).encode("utf-8"))


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise ConfigError(f"Missing config file: {path}")
    with path.open("r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Invalid JSON in {path}: {exc}") from exc


class Presets:
    def __init__(self, experiments: Iterable[ExperimentConfig]):
        self._experiments: Dict[str, ExperimentConfig] = {}
        for exp in experiments:
            if exp.preset in self._experiments:
                raise ConfigError(f"Duplicate preset '{exp.preset}'")
            self._experiments[exp.preset] = exp

    def names(self) -> List[str]:
        return sorted(self._experiments)

    def get(self, preset: str) -> ExperimentConfig:
        try:
            return copy.deepcopy(self._experiments[preset])
        except KeyError as exc:
            raise ConfigError(f"Unknown preset '{preset}'; available: {', '.join(self.names())}") from exc


def load_presets(path: Optional[Path | str] = None) -> Presets:
    cfg_path = resolve_config_path(path)
    raw = _read_json(cfg_path)
    if not isinstance(raw, dict):
        raise ConfigError("Invalid config format: expected a JSON object.")
    check_keys(raw, ["schema_version", "experiments"], str(cfg_path))
    experiments_raw = raw.get("experiments")
    if not isinstance(experiments_raw, list) or not experiments_raw:
        raise ConfigError("No experiments defined in config.")
    return Presets(ExperimentConfig.from_dict(item) for item in experiments_raw)


def load_experiment(path: Optional[Path | str] = None, preset: Optional[str] = None) -> ExperimentConfig:
    """Load a standalone experiment document, or a named preset from a presets document."""

    cfg_path = resolve_config_path(path)
    raw = _read_json(cfg_path)
    if not isinstance(raw, dict):
        raise ConfigError(f"Invalid config format in {cfg_path}: expected a JSON object.")
    if "experiments" in raw:
        if not preset:
            names = ", ".join(load_presets(cfg_path).names())
            raise ConfigError(f"{cfg_path} holds several presets; pick one with --preset ({names})")
        return load_presets(cfg_path).get(preset)
    config = ExperimentConfig.from_dict(raw)
    if preset and preset != config.preset:
        raise ConfigError(f"{cfg_path} defines preset '{config.preset}', not '{preset}'")
    return config


def write_experiment(config: ExperimentConfig, path: Path) -> Path:
    return write_json(config.to_dict(), path)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: Sequence[str]) -> Dict[str, Any]:
    """Turn ``key=value`` strings into a dict; repeating a key with a new value conflicts."""

    parsed: Dict[str, Any] = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"Override '{item}' must look like key=value")
        value = _parse_value(value.strip())
        if key in parsed and parsed[key] != value:
            raise ConflictError(f"Override '{key}' given twice with different values: {parsed[key]!r} and {value!r}")
        parsed[key] = value
    return parsed


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any] | Sequence[str]) -> ExperimentConfig:
    """Return a new config with dotted-key overrides applied and unknown keys rejected."""

    if not isinstance(overrides, Mapping):
        overrides = parse_overrides(overrides)
    data = config.to_dict()
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        target = data
        for depth, part in enumerate(parts[:-1]):
            check_keys({part: None}, list(target), f"config section '{'.'.join(parts[:depth]) or 'root'}'")
            if not isinstance(target[part], dict):
                raise ConfigError(f"'{'.'.join(parts[: depth + 1])}' is not a config section")
            target = target[part]
        check_keys({parts[-1]: None}, list(target), f"config section '{'.'.join(parts[:-1]) or 'root'}'")
        target[parts[-1]] = value
    return ExperimentConfig.from_dict(data)


__all__ = [
    "ABLATION_ORDER",
    "CONFIG_PATH",
    "ExperimentConfig",
    "ExperimentName",
    "METHOD_FLAGS",
    "Presets",
    "apply_overrides",
    "config_hash",
    "load_experiment",
    "load_presets",
    "parse_overrides",
    "resolve_config_path",
    "write_experiment",
]
