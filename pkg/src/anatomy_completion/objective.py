"""Soft Dice objectives for full, residual and multi-class completion."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .network import DenoisingAutoEncoder, OutputMode
from .utils import check_keys

ArrayLike = Union[torch.Tensor, np.ndarray]

DEFAULT_EPS = 1e-6


class LossMapping(str, Enum):
    FULL = "full"
    RESIDUAL = "residual"


class Reduction(str, Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class LossConfig:
    mapping: LossMapping = LossMapping.FULL
    aggregated: bool = False
    smooth_eps: float = DEFAULT_EPS
    class_weights: Optional[Tuple[float, ...]] = None
    reduction: Reduction = Reduction.SUM

    def __post_init__(self) -> None:
        self.mapping = LossMapping(self.mapping)
        self.reduction = Reduction(self.reduction)
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)

    def validate(self) -> None:
        if self.smooth_eps < 0:
            raise ConfigError(f"smooth_eps must be >= 0, got {self.smooth_eps}")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ConfigError(f"class_weights must be positive, got {list(self.class_weights)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mapping": self.mapping.value,
            "aggregated": self.aggregated,
            "smooth_eps": self.smooth_eps,
            "class_weights": list(self.class_weights) if self.class_weights is not None else None,
            "reduction": self.reduction.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LossConfig":
        check_keys(data, cls.__dataclass_fields__, "loss config")
        weights = data.get("class_weights")
        return cls(
            mapping=data.get("mapping", LossMapping.FULL.value),
            aggregated=bool(data.get("aggregated", False)),
            smooth_eps=float(data.get("smooth_eps", DEFAULT_EPS)),
            class_weights=tuple(weights) if weights is not None else None,
            reduction=data.get("reduction", Reduction.SUM.value),
        )


def _as_tensor(value: ArrayLike, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    tensor = torch.as_tensor(np.asarray(value, dtype=np.float64))
    if like is not None:
        tensor = tensor.to(dtype=like.dtype, device=like.device)
    return tensor


def _check_same_shape(y: torch.Tensor, p: torch.Tensor) -> None:
    if tuple(y.shape) != tuple(p.shape):
        raise ShapeError(f"Dice operands differ in shape: {tuple(y.shape)} vs {tuple(p.shape)}")


def _dice(y: torch.Tensor, p: torch.Tensor, eps: float, dims: Sequence[int]) -> torch.Tensor:
    y = y.to(p.dtype)
    numerator = 2.0 * (y * p).sum(dim=tuple(dims)) + eps
    denominator = (y * y).sum(dim=tuple(dims)) + (p * p).sum(dim=tuple(dims)) + eps
    # Empty against empty counts as perfect overlap even without smoothing.
    empty = denominator == 0
    one = torch.ones_like(denominator)
    return torch.where(empty, one, numerator / torch.where(empty, one, denominator))


def dice_coefficient(y: ArrayLike, p: ArrayLike, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """(2 sum(y*p) + eps) / (sum(y*y) + sum(p*p) + eps) over every element."""

    p = _as_tensor(p)
    y = _as_tensor(y, like=p)
    _check_same_shape(y, p)
    return _dice(y, p, eps, dims=range(y.ndim))


def dice_loss(y: ArrayLike, p: ArrayLike, eps: float = DEFAULT_EPS) -> torch.Tensor:
    return 1.0 - dice_coefficient(y, p, eps)


def sample_dice_losses(y: torch.Tensor, p: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Per-sample Dice loss over (B, ...) tensors; one term per (n, m) pair."""

    _check_same_shape(y, p)
    return 1.0 - _dice(y, p, eps, dims=range(1, y.ndim))


def _reduce(terms: torch.Tensor, reduction: Reduction) -> torch.Tensor:
    return terms.mean() if reduction is Reduction.MEAN else terms.sum()


def full_loss(outputs: torch.Tensor, targets: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Sum of Dice losses between each y_n and the estimate for each of its variants."""

    return _reduce(sample_dice_losses(targets, outputs, config.smooth_eps), config.reduction)


def residual_loss(
    inputs: torch.Tensor, residuals: torch.Tensor, targets: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    """Sum of Dice losses between each y_n and clamp(x + residual, 0, 1)."""

    _check_same_shape(inputs, residuals)
    completed = torch.clamp(inputs.to(residuals.dtype) + residuals, 0.0, 1.0)
    return _reduce(sample_dice_losses(targets, completed, config.smooth_eps), config.reduction)


def multiclass_loss(
    y: ArrayLike,
    p: ArrayLike,
    weights: Optional[Sequence[float]] = None,
    eps: float = DEFAULT_EPS,
    reduction: Reduction = Reduction.SUM,
) -> torch.Tensor:
    """Weighted mean over channels of per-channel Dice loss.

    Accepts (C, ...) for one volume or (B, C, ...) for a batch; batch terms are
    reduced with ``reduction``.
    """

    p = _as_tensor(p)
    y = _as_tensor(y, like=p)
    _check_same_shape(y, p)
    if y.ndim == 4:
        y, p = y[None], p[None]
    if y.ndim != 5:
        raise ShapeError(f"Expected (C, L, W, H) or (B, C, L, W, H) grids, got {y.ndim}D")
    channels = y.shape[1]
    if channels < 2:
        raise ShapeError(f"Multi-class loss needs at least 2 channels, got {channels}")
    if weights is None:
        w = torch.ones(channels, dtype=p.dtype, device=p.device)
    else:
        if len(weights) != channels:
            raise ShapeError(f"Got {len(weights)} class weights for {channels} channels")
        w = torch.as_tensor([float(v) for v in weights], dtype=p.dtype, device=p.device)
    per_channel = 1.0 - _dice(y, p, eps, dims=(2, 3, 4))  # (B, C)
    terms = (per_channel * w).sum(dim=1) / w.sum()
    return _reduce(terms, Reduction(reduction))


def _require_mode(model: DenoisingAutoEncoder, mode: OutputMode) -> None:
    if model.mode is not mode:
        raise ConfigError(f"Loss expects a {mode.value}-mode model, got {model.mode.value}")


def loss_full(
    model: DenoisingAutoEncoder, inputs: torch.Tensor, targets: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    _require_mode(model, OutputMode.FULL)
    if not model.config.is_binary:
        return loss_multiclass(model, inputs, targets, config)
    return full_loss(model(inputs), targets, config)


def loss_residual(
    model: DenoisingAutoEncoder, inputs: torch.Tensor, targets: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    _require_mode(model, OutputMode.RESIDUAL)
    if not model.config.is_binary:
        raise ConfigError("Residual completion is not supported for multi-class outputs")
    return residual_loss(inputs, model(inputs), targets, config)


def loss_multiclass(
    model: DenoisingAutoEncoder, inputs: torch.Tensor, targets: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    if model.config.residual:
        raise ConfigError("Residual completion is not supported for multi-class outputs")
    return multiclass_loss(targets, model(inputs), config.class_weights, config.smooth_eps, config.reduction)


def compute_loss(
    model: DenoisingAutoEncoder, inputs: torch.Tensor, targets: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    """Dispatch on the loss mapping; the model's mode must agree with it."""

    if config.mapping is LossMapping.RESIDUAL:
        return loss_residual(model, inputs, targets, config)
    return loss_full(model, inputs, targets, config)


__all__ = [
    "LossConfig",
    "LossMapping",
    "Reduction",
    "compute_loss",
    "dice_coefficient",
    "dice_loss",
    "full_loss",
    "loss_full",
    "loss_multiclass",
    "loss_residual",
    "multiclass_loss",
    "residual_loss",
    "sample_dice_losses",
]
