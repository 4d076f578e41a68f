"""Volumetric data types and geometry-preserving transforms.

Every grid in this package is a row-major ``numpy`` array with axis order
``(L, W, H)``. Label grids are stored as ``uint8`` so they map one-to-one
onto the on-disk cache format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidVolumeError, OutOfRangeError, ShapeError, UndefinedFractionError

AXIS_ORDER = ("L", "W", "H")
MAX_LABEL = 255
BACKGROUND = "background"

Shape3 = Tuple[int, int, int]
Spacing3 = Tuple[float, float, float]


class FractionReference(str, Enum):
    """Population a class's voxel count is divided by."""

    TOTAL_FOREGROUND = "total_foreground"
    LARGEST_CLASS = "largest_class"
    WHOLE_GRID = "whole_grid"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _check_spacing(spacing: Sequence[float]) -> Spacing3:
    if len(spacing) != 3:
        raise InvalidVolumeError(f"Expected 3 spacing components, got {len(spacing)}")
    values = tuple(float(s) for s in spacing)
    if any(not np.isfinite(s) or s <= 0 for s in values):
        raise InvalidVolumeError(f"Spacing values must be positive, got {values}")
    return values  # type: ignore[return-value]


def _check_grid(data: np.ndarray) -> None:
    if data.ndim != 3:
        raise InvalidVolumeError(f"Expected a 3D grid, got {data.ndim}D")
    if data.size == 0 or min(data.shape) < 1:
        raise InvalidVolumeError(f"Grid must be non-empty, got shape {data.shape}")


def default_affine(spacing: Sequence[float]) -> np.ndarray:
    """Axis-aligned voxel-to-world transform (3x4) with the origin at voxel 0."""

    affine = np.zeros((3, 4), dtype=np.float64)
    affine[:, :3] = np.diag([float(s) for s in spacing])
    return affine


def _as_labels(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data)
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    if not np.issubdtype(data.dtype, np.integer):
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise InvalidVolumeError("Label grid holds non-integer values")
        data = rounded
    if data.size and (data.min() < 0 or data.max() > MAX_LABEL):
        raise OutOfRangeError(f"Labels must lie in [0, {MAX_LABEL}], got [{data.min()}, {data.max()}]")
    return data.astype(np.uint8)


@dataclass(frozen=True)
class LabelVolume:
    """Dense grid of anatomy class ids with physical geometry."""

    data: np.ndarray
    spacing: Spacing3
    class_table: Mapping[int, str]
    affine: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        data = _as_labels(self.data)
        _check_grid(data)
        spacing = _check_spacing(self.spacing)
        table = {int(k): str(v) for k, v in dict(self.class_table).items()}
        if any(k < 1 or k > MAX_LABEL for k in table):
            raise OutOfRangeError(f"Class ids must lie in [1, {MAX_LABEL}], got {sorted(table)}")
        present = {int(v) for v in np.unique(data)} - {0}
        unknown = present - set(table)
        if unknown:
            raise InvalidVolumeError(f"Labels {sorted(unknown)} missing from class table")
        affine = default_affine(spacing) if self.affine is None else np.asarray(self.affine, dtype=np.float64)
        if affine.shape == (4, 4):
            affine = affine[:3, :]
        if affine.shape != (3, 4):
            raise InvalidVolumeError(f"Affine must be 3x4, got {affine.shape}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "class_table", table)
        object.__setattr__(self, "affine", _frozen(affine))

    @property
    def shape(self) -> Shape3:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    def present_classes(self) -> Tuple[int, ...]:
        return tuple(int(v) for v in np.unique(self.data) if v != 0)

    def counts(self) -> Dict[int, int]:
        """Voxel count per present nonzero class."""

        values, counts = np.unique(self.data, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts) if v != 0}

    def class_ids(self, names: Iterable[str]) -> Tuple[int, ...]:
        lookup = {name: cid for cid, name in self.class_table.items()}
        missing = [name for name in names if name not in lookup]
        if missing:
            raise OutOfRangeError(f"Unknown anatomy names: {missing}")
        return tuple(sorted(lookup[name] for name in names))

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        """Same geometry and class table, new labels."""

        return LabelVolume(data=data, spacing=self.spacing, class_table=self.class_table, affine=self.affine)

    def without_classes(self, class_ids: Iterable[int]) -> "LabelVolume":
        """Copy with the given classes erased to background."""

        ids = np.array(sorted(set(int(c) for c in class_ids)), dtype=np.uint8)
        data = np.where(np.isin(self.data, ids), 0, self.data)
        return self.with_data(data)

    def only_classes(self, class_ids: Iterable[int]) -> "LabelVolume":
        ids = np.array(sorted(set(int(c) for c in class_ids)), dtype=np.uint8)
        data = np.where(np.isin(self.data, ids), self.data, 0)
        return self.with_data(data)


@dataclass(frozen=True)
class BinaryVolume:
    """Dense occupancy grid over {0, 1}."""

    data: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        _check_grid(data)
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        elif not np.isin(data, (0, 1)).all():
            raise InvalidVolumeError("Binary grid holds values outside {0, 1}")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape3:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    @property
    def mask(self) -> np.ndarray:
        return self.data.astype(bool)

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


@dataclass(frozen=True)
class OneHotVolume:
    """Per-class binary channels; channel 0 is background."""

    data: np.ndarray
    class_table: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise InvalidVolumeError(f"Expected a 4D (C, L, W, H) grid, got {data.ndim}D")
        if data.shape[0] < 2:
            raise InvalidVolumeError(f"One-hot volumes need at least 2 channels, got {data.shape[0]}")
        if not np.isin(data, (0, 1)).all():
            raise InvalidVolumeError("One-hot grid holds values outside {0, 1}")
        if not (data.sum(axis=0) == 1).all():
            raise InvalidVolumeError("One-hot channels must sum to 1 at every voxel")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))
        object.__setattr__(self, "class_table", {int(k): str(v) for k, v in dict(self.class_table).items()})

    @property
    def num_classes(self) -> int:
        return int(self.data.shape[0])

    def argmax(self) -> np.ndarray:
        return labels_from_channels(self.data)


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    # Output voxel centre i maps to source coordinate (i + 0.5) * n_in / n_out.
    i = np.arange(n_out, dtype=np.int64)
    return np.minimum(((2 * i + 1) * n_in) // (2 * n_out), n_in - 1)


def _check_target(target_shape: Sequence[int]) -> Shape3:
    if len(target_shape) != 3:
        raise ShapeError(f"Target shape must have 3 components, got {tuple(target_shape)}")
    shape = tuple(int(s) for s in target_shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"Target shape components must be >= 1, got {shape}")
    return shape  # type: ignore[return-value]


def nearest_resample(data: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resampling of a 3D grid (voxel-centre aligned)."""

    _check_grid(np.asarray(data))
    shape = _check_target(target_shape)
    index = [_nearest_indices(n_in, n_out) for n_in, n_out in zip(data.shape, shape)]
    return np.asarray(data)[np.ix_(*index)]


def _rescaled_geometry(
    spacing: Spacing3, affine: np.ndarray, in_shape: Shape3, out_shape: Shape3
) -> Tuple[Spacing3, np.ndarray]:
    ratio = np.array(in_shape, dtype=np.float64) / np.array(out_shape, dtype=np.float64)
    new_spacing = tuple(float(s) for s in np.array(spacing) * ratio)
    linear = affine[:, :3]
    origin = affine[:, 3] + linear @ (0.5 * ratio - 0.5)
    new_affine = np.zeros((3, 4), dtype=np.float64)
    new_affine[:, :3] = linear * ratio[None, :]
    new_affine[:, 3] = origin
    return new_spacing, new_affine  # type: ignore[return-value]


def resample_labels(vol: LabelVolume, target_shape: Sequence[int]) -> LabelVolume:
    """Resample labels to ``target_shape`` without inventing class ids."""

    if vol.data.size == 0:
        raise InvalidVolumeError("Cannot resample an empty grid")
    shape = _check_target(target_shape)
    if shape == vol.shape:
        return vol
    data = nearest_resample(vol.data, shape)
    spacing, affine = _rescaled_geometry(vol.spacing, vol.affine, vol.shape, shape)
    return LabelVolume(data=data, spacing=spacing, class_table=vol.class_table, affine=affine)


def binarize(vol: LabelVolume) -> BinaryVolume:
    return BinaryVolume(data=(vol.data != 0).astype(np.uint8), spacing=vol.spacing)


def one_hot(vol: LabelVolume, num_classes: int) -> OneHotVolume:
    """Expand labels into ``num_classes`` channels, channel 0 = background."""

    if num_classes < 2:
        raise OutOfRangeError(f"num_classes must be >= 2, got {num_classes}")
    top = int(vol.data.max())
    if top >= num_classes:
        raise OutOfRangeError(f"Label {top} does not fit into {num_classes} classes")
    channels = np.arange(num_classes, dtype=np.uint8)[:, None, None, None]
    data = (vol.data[None, ...] == channels).astype(np.uint8)
    table = {0: BACKGROUND, **{cid: name for cid, name in vol.class_table.items() if cid < num_classes}}
    return OneHotVolume(data=data, class_table=table)


def labels_from_channels(probabilities: np.ndarray) -> np.ndarray:
    """Argmax over the leading channel axis."""

    return np.argmax(np.asarray(probabilities), axis=0).astype(np.uint8)


def volume_fraction(
    vol: LabelVolume,
    class_id: int,
    reference: FractionReference | str = FractionReference.TOTAL_FOREGROUND,
) -> float:
    """Voxel share of ``class_id`` relative to the chosen reference population."""

    reference = FractionReference(reference)
    if int(class_id) not in vol.class_table:
        raise OutOfRangeError(f"Class {class_id} is not in the class table")
    counts = vol.counts()
    return fraction_from_counts(counts, int(class_id), reference, grid_size=int(vol.data.size))


def fraction_from_counts(
    counts: Mapping[int, int],
    class_id: int,
    reference: FractionReference | str,
    *,
    grid_size: int,
) -> float:
    reference = FractionReference(reference)
    if reference is FractionReference.TOTAL_FOREGROUND:
        denominator = sum(counts.values())
    elif reference is FractionReference.LARGEST_CLASS:
        denominator = max(counts.values(), default=0)
    else:
        denominator = grid_size
    if denominator <= 0:
        raise UndefinedFractionError(f"Reference population '{reference.value}' is empty")
    return counts.get(int(class_id), 0) / denominator


def upscale_binary(vol: BinaryVolume, target_shape: Sequence[int]) -> BinaryVolume:
    """Nearest-neighbour resize of an occupancy grid; values stay in {0, 1}."""

    shape = _check_target(target_shape)
    if shape == vol.shape:
        return vol
    ratio = np.array(vol.shape, dtype=np.float64) / np.array(shape, dtype=np.float64)
    spacing = tuple(float(s) for s in np.array(vol.spacing) * ratio)
    return BinaryVolume(data=nearest_resample(vol.data, shape), spacing=spacing)


__all__ = [
    "AXIS_ORDER",
    "BinaryVolume",
    "FractionReference",
    "LabelVolume",
    "OneHotVolume",
    "binarize",
    "default_affine",
    "fraction_from_counts",
    "labels_from_channels",
    "nearest_resample",
    "one_hot",
    "resample_labels",
    "upscale_binary",
    "volume_fraction",
]
