"""3D convolutional denoising auto-encoder for anatomy completion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .utils import check_keys
from .voxel import BinaryVolume, LabelVolume, OneHotVolume, labels_from_channels, one_hot

logger = logging.getLogger(__name__)

CANONICAL_SHAPE = (128, 128, 128)
PARAMETER_RANGE = (20_000_000, 24_000_000)
TAIL_CONVS = 4


class OutputMode(str, Enum):
    FULL = "full"
    RESIDUAL = "residual"


class FinalActivation(str, Enum):
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


@dataclass
class DaeConfig:
    """Topology of the auto-encoder.

    ``channel_widths`` holds one width per down stage, ``head_width`` is the
    width of the full-resolution decoder stage and the tail convolutions.
    """

    input_shape: Tuple[int, int, int] = CANONICAL_SHAPE
    down_stages: int = 4
    channel_widths: Tuple[int, ...] = (64, 176, 352, 704)
    head_width: int = 32
    kernel_size: int = 3
    residual: bool = False
    num_classes: int = 1
    final_activation: FinalActivation = FinalActivation.SIGMOID
    threshold: float = 0.5
    strict: bool = False

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.channel_widths = tuple(int(w) for w in self.channel_widths)
        self.final_activation = FinalActivation(self.final_activation)

    @property
    def is_binary(self) -> bool:
        return self.num_classes == 1

    @property
    def in_channels(self) -> int:
        return 1 if self.is_binary else self.num_classes

    @property
    def mode(self) -> OutputMode:
        return OutputMode.RESIDUAL if self.residual else OutputMode.FULL

    @property
    def bottleneck_shape(self) -> Tuple[int, int, int]:
        factor = 2**self.down_stages
        return tuple(s // factor for s in self.input_shape)

    @property
    def is_canonical(self) -> bool:
        return self.is_binary and self.input_shape == CANONICAL_SHAPE and self.down_stages == 4

    def validate(self) -> None:
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must have 3 sides, got {self.input_shape}")
        if self.down_stages < 1:
            raise ConfigError(f"down_stages must be >= 1, got {self.down_stages}")
        if len(self.channel_widths) != self.down_stages:
            raise ConfigError(
                f"channel_widths needs one width per down stage ({self.down_stages}), got {list(self.channel_widths)}"
            )
        if any(w < 1 for w in (*self.channel_widths, self.head_width)):
            raise ConfigError("Channel widths must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd number, got {self.kernel_size}")
        factor = 2**self.down_stages
        if any(s % factor for s in self.input_shape):
            raise ConfigError(f"input_shape {self.input_shape} must be divisible by 2^{self.down_stages}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.is_binary and self.final_activation is not FinalActivation.SIGMOID:
            raise ConfigError("A binary head uses the sigmoid activation")
        if not self.is_binary and self.final_activation is not FinalActivation.SOFTMAX:
            raise ConfigError("A multi-class head uses the softmax activation")
        if self.residual and not self.is_binary:
            raise ConfigError("Residual mode is only defined for binary completion (num_classes=1)")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie strictly in (0, 1), got {self.threshold}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "down_stages": self.down_stages,
            "channel_widths": list(self.channel_widths),
            "head_width": self.head_width,
            "kernel_size": self.kernel_size,
            "residual": self.residual,
            "num_classes": self.num_classes,
            "final_activation": self.final_activation.value,
            "threshold": self.threshold,
            "strict": self.strict,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DaeConfig":
        check_keys(data, cls.__dataclass_fields__, "dae config")
        num_classes = int(data.get("num_classes", 1))
        default_act = FinalActivation.SIGMOID if num_classes == 1 else FinalActivation.SOFTMAX
        return cls(
            input_shape=tuple(data.get("input_shape", CANONICAL_SHAPE)),
            down_stages=int(data.get("down_stages", 4)),
            channel_widths=tuple(data.get("channel_widths", (64, 176, 352, 704))),
            head_width=int(data.get("head_width", 32)),
            kernel_size=int(data.get("kernel_size", 3)),
            residual=bool(data.get("residual", False)),
            num_classes=num_classes,
            final_activation=data.get("final_activation", default_act.value),
            threshold=float(data.get("threshold", 0.5)),
            strict=bool(data.get("strict", False)),
        )


@dataclass
class LayerSpec:
    kind: str  # "conv", "down" or "up"
    in_channels: int
    out_channels: int


def layer_plan(config: DaeConfig) -> List[LayerSpec]:
    """Ordered layers: strided encoder, (transposed, unit-stride) decoder pairs, tail."""

    widths = list(config.channel_widths)
    plan: List[LayerSpec] = []
    prev = config.in_channels
    for width in widths:
        plan.append(LayerSpec("down", prev, width))
        prev = width
    targets = widths[-2::-1] + [config.head_width]
    for width in targets:
        plan.append(LayerSpec("up", prev, width))
        plan.append(LayerSpec("conv", width, width))
        prev = width
    for _ in range(TAIL_CONVS - 1):
        plan.append(LayerSpec("conv", prev, prev))
    plan.append(LayerSpec("conv", prev, config.num_classes))
    return plan


def expected_parameter_count(config: DaeConfig) -> int:
    """Closed-form count: every layer holds k^3 * c_in * c_out weights plus c_out biases."""

    k3 = config.kernel_size**3
    return sum(k3 * spec.in_channels * spec.out_channels + spec.out_channels for spec in layer_plan(config))


def _make_layer(spec: LayerSpec, kernel_size: int) -> nn.Module:
    pad = kernel_size // 2
    if spec.kind == "down":
        return nn.Conv3d(spec.in_channels, spec.out_channels, kernel_size, stride=2, padding=pad)
    if spec.kind == "up":
        return nn.ConvTranspose3d(
            spec.in_channels, spec.out_channels, kernel_size, stride=2, padding=pad, output_padding=1
        )
    return nn.Conv3d(spec.in_channels, spec.out_channels, kernel_size, stride=1, padding=pad)


class DenoisingAutoEncoder(nn.Module):
    """Encoder/decoder whose raw output is either the full estimate or the residual."""

    def __init__(self, config: DaeConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(_make_layer(spec, config.kernel_size) for spec in layer_plan(config))
        self.relu = nn.ReLU(inplace=True)

    @property
    def mode(self) -> OutputMode:
        return self.config.mode

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x
        last = len(self.layers) - 1
        for idx, layer in enumerate(self.layers):
            out = layer(out)
            if idx < last:
                out = self.relu(out)
        if self.config.final_activation is FinalActivation.SOFTMAX:
            return torch.softmax(out, dim=1)
        return torch.sigmoid(out)


def _init_weights(model: nn.Module) -> None:
    for module in model.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
            if module.bias is not None:
                nn.init.zeros_(module.bias)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_dae(config: DaeConfig, seed: int = 0) -> DenoisingAutoEncoder:
    """Build and initialize the auto-encoder from its own seed stream."""

    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = DenoisingAutoEncoder(config)
        _init_weights(model)
    total = count_parameters(model)
    logger.info("Built %s DAE with %s trainable parameters", config.mode.value, f"{total:,}")
    if config.is_canonical:
        low, high = PARAMETER_RANGE
        if not low <= total <= high:
            message = f"Canonical config has {total:,} parameters, outside [{low:,}, {high:,}]"
            if config.strict:
                raise ConfigError(message)
            logger.warning(message)
    return model


@dataclass
class ModelOutput:
    """Network probabilities (C x L x W x H) and what they estimate."""

    probabilities: np.ndarray
    mode: OutputMode = OutputMode.FULL
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_channels(self) -> int:
        return int(self.probabilities.shape[0])

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return tuple(self.probabilities.shape[1:])


InputVolume = Union[BinaryVolume, LabelVolume, OneHotVolume, np.ndarray]


def input_array(volume: InputVolume, config: DaeConfig) -> np.ndarray:
    """Channels-first float32 network input for one volume."""

    if isinstance(volume, BinaryVolume):
        data = volume.data[None].astype(np.float32)
    elif isinstance(volume, OneHotVolume):
        data = volume.data.astype(np.float32)
    elif isinstance(volume, LabelVolume):
        if config.is_binary:
            data = (volume.data != 0)[None].astype(np.float32)
        else:
            data = one_hot(volume, config.num_classes).data.astype(np.float32)
    else:
        data = np.asarray(volume, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
    if data.shape[0] != config.in_channels:
        raise ShapeError(f"Input has {data.shape[0]} channel(s), network expects {config.in_channels}")
    if tuple(data.shape[1:]) != config.input_shape:
        raise ShapeError(f"Input shape {tuple(data.shape[1:])} does not match network input {config.input_shape}")
    return data


def forward(model: DenoisingAutoEncoder, x: InputVolume, device: Optional[torch.device] = None) -> ModelOutput:
    """Inference on one volume; deterministic for fixed weights."""

    data = input_array(x, model.config)
    device = device or next(model.parameters()).device
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            probs = model(torch.from_numpy(data)[None].to(device))[0]
    finally:
        model.train(was_training)
    return ModelOutput(probabilities=probs.cpu().numpy(), mode=model.mode)


def compose_completion(x: BinaryVolume, out: ModelOutput, threshold: float = 0.5) -> BinaryVolume:
    """Binarize a full estimate, or add a residual estimate to the input first."""

    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie strictly in (0, 1), got {threshold}")
    if out.num_channels != 1:
        raise ShapeError(f"Binary completion needs a single-channel output, got {out.num_channels}")
    if out.spatial_shape != x.shape:
        raise ShapeError(f"Output shape {out.spatial_shape} does not match input {x.shape}")
    probs = out.probabilities[0]
    if out.mode is OutputMode.RESIDUAL:
        probs = np.clip(x.data.astype(np.float32) + probs, 0.0, 1.0)
    return BinaryVolume(data=(probs >= threshold).astype(np.uint8), spacing=x.spacing)


def completion_labels(out: ModelOutput) -> np.ndarray:
    """Label map from a multi-class output via channel argmax (0 = background)."""

    if out.num_channels < 2:
        raise ShapeError("Label maps need a multi-class output")
    return labels_from_channels(out.probabilities)


def residual_only(x: BinaryVolume, completion: BinaryVolume) -> BinaryVolume:
    """Voxels the completion adds to the input."""

    return BinaryVolume(data=(completion.data & (1 - x.data)).astype(np.uint8), spacing=x.spacing)


__all__ = [
    "DaeConfig",
    "DenoisingAutoEncoder",
    "FinalActivation",
    "LayerSpec",
    "ModelOutput",
    "OutputMode",
    "build_dae",
    "completion_labels",
    "compose_completion",
    "count_parameters",
    "expected_parameter_count",
    "forward",
    "input_array",
    "layer_plan",
    "residual_only",
]
