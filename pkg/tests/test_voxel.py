from __future__ import annotations

import numpy as np
import pytest

from anatomy_completion.errors import InvalidVolumeError, OutOfRangeError, ShapeError, UndefinedFractionError
from anatomy_completion.voxel import (
    BinaryVolume,
    FractionReference,
    LabelVolume,
    binarize,
    labels_from_channels,
    nearest_resample,
    one_hot,
    resample_labels,
    upscale_binary,
    volume_fraction,
)


def test_label_volume_rejects_ids_missing_from_table():
    data = np.zeros((2, 2, 2), dtype=np.uint8)
    data[0, 0, 0] = 4
    with pytest.raises(InvalidVolumeError):
        LabelVolume(data=data, spacing=(1, 1, 1), class_table={1: "liver"})


def test_label_volume_rejects_bad_spacing_and_ids():
    data = np.zeros((2, 2, 2), dtype=np.uint8)
    with pytest.raises(InvalidVolumeError):
        LabelVolume(data=data, spacing=(1, 0, 1), class_table={})
    with pytest.raises(OutOfRangeError):
        LabelVolume(data=data, spacing=(1, 1, 1), class_table={0: "background"})
    with pytest.raises(InvalidVolumeError):
        LabelVolume(data=np.zeros((2, 2)), spacing=(1, 1, 1), class_table={})


def test_label_volume_is_read_only(small_labels):
    with pytest.raises(ValueError):
        small_labels.data[0, 0, 0] = 2


def test_without_classes_erases_only_named_classes(small_labels):
    out = small_labels.without_classes([1, 3])
    assert out.present_classes() == (2,)
    assert out.class_table == small_labels.class_table
    assert small_labels.present_classes() == (1, 2, 3)


def test_counts(small_labels):
    assert small_labels.counts() == {1: 3, 2: 1, 3: 2}


def test_nearest_resample_picks_voxel_centres():
    data = np.arange(4, dtype=np.uint8).reshape(4, 1, 1) * np.ones((4, 2, 2), dtype=np.uint8)
    down = nearest_resample(data, (2, 2, 2))
    assert down[:, 0, 0].tolist() == [1, 3]
    up = nearest_resample(down, (4, 2, 2))
    assert up[:, 0, 0].tolist() == [1, 1, 3, 3]


def test_nearest_resample_rejects_bad_target():
    with pytest.raises(ShapeError):
        nearest_resample(np.zeros((2, 2, 2)), (2, 2))


def test_resample_labels_never_invents_classes():
    rng = np.random.default_rng(0)
    data = rng.integers(0, 4, size=(9, 7, 5)).astype(np.uint8)
    vol = LabelVolume(data=data, spacing=(1, 1, 1), class_table={1: "a", 2: "b", 3: "c"})
    out = resample_labels(vol, (4, 11, 3))
    assert out.shape == (4, 11, 3)
    assert set(np.unique(out.data)) <= set(np.unique(data))
    assert out.spacing == pytest.approx((9 / 4, 7 / 11, 5 / 3))


def test_resample_to_same_shape_is_identity(small_labels):
    assert resample_labels(small_labels, small_labels.shape) is small_labels


def test_one_hot_argmax_is_exact():
    rng = np.random.default_rng(5)
    data = rng.integers(0, 6, size=(5, 6, 7)).astype(np.uint8)
    vol = LabelVolume(data=data, spacing=(1, 1, 1), class_table={i: f"c{i}" for i in range(1, 6)})
    encoded = one_hot(vol, 6)
    assert encoded.num_classes == 6
    assert (encoded.data.sum(axis=0) == 1).all()
    assert np.array_equal(encoded.argmax(), data)
    assert np.array_equal(labels_from_channels(encoded.data.astype(np.float32)), data)


def test_one_hot_rejects_labels_beyond_channel_count(small_labels):
    with pytest.raises(OutOfRangeError):
        one_hot(small_labels, 3)


def test_volume_fraction_references(small_labels):
    assert volume_fraction(small_labels, 1) == pytest.approx(3 / 6)
    assert volume_fraction(small_labels, 2, FractionReference.LARGEST_CLASS) == pytest.approx(1 / 3)
    assert volume_fraction(small_labels, 3, "whole_grid") == pytest.approx(2 / 64)


def test_volume_fraction_of_empty_population_is_undefined():
    vol = LabelVolume(data=np.zeros((2, 2, 2), dtype=np.uint8), spacing=(1, 1, 1), class_table={1: "liver"})
    with pytest.raises(UndefinedFractionError):
        volume_fraction(vol, 1)
    assert volume_fraction(vol, 1, FractionReference.WHOLE_GRID) == 0.0


def test_volume_fraction_unknown_class(small_labels):
    with pytest.raises(OutOfRangeError):
        volume_fraction(small_labels, 9)


def test_binary_volume_and_upscale(small_labels):
    mask = binarize(small_labels)
    assert mask.count() == 6
    up = upscale_binary(mask, (8, 8, 8))
    assert up.shape == (8, 8, 8)
    assert set(np.unique(up.data)) <= {0, 1}
    assert up.count() == 6 * 8
    with pytest.raises(InvalidVolumeError):
        BinaryVolume(data=np.full((2, 2, 2), 2, dtype=np.uint8))
