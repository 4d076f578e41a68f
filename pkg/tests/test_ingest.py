from __future__ import annotations

import json

import nibabel as nib
import numpy as np
import pytest

from anatomy_completion.errors import AxisOrderError, ChecksumError, MissingFileError, SidecarParseError
from anatomy_completion.ingest import (
    load_mask_directory,
    load_nifti_labels,
    load_subjects,
    merge_classes,
    read_sidecar,
    read_volume_cache,
    save_nifti,
    write_volume_cache,
)
from anatomy_completion.voxel import LabelVolume, binarize


def _write_mask(path, mask, spacing=(1.5, 1.5, 2.0)):
    image = nib.Nifti1Image(mask.astype(np.uint8), np.diag([*spacing, 1.0]))
    nib.save(image, str(path))


def test_nifti_round_trip_keeps_labels_and_geometry(tmp_path, small_labels):
    path = save_nifti(small_labels, tmp_path / "subject.nii.gz")
    loaded = load_nifti_labels(path)
    assert np.array_equal(loaded.data, small_labels.data)
    assert loaded.class_table == small_labels.class_table
    assert loaded.spacing == pytest.approx(small_labels.spacing)
    assert np.allclose(loaded.affine, small_labels.affine)


def test_nifti_without_sidecar_gets_generic_names(tmp_path):
    data = np.zeros((3, 3, 3), dtype=np.uint8)
    data[1, 1, 1] = 7
    _write_mask(tmp_path / "s.nii", data)
    vol = load_nifti_labels(tmp_path / "s.nii")
    assert vol.class_table == {7: "class_7"}


def test_cache_round_trip_and_checksum(tmp_path, small_labels):
    info = write_volume_cache(small_labels, tmp_path / "vol", extra={"original_shape": [8, 8, 8]})
    sidecar = tmp_path / info["file"]
    loaded = read_volume_cache(sidecar, expected_sha256=info["sha256"])
    assert np.array_equal(loaded.data, small_labels.data)
    assert read_sidecar(sidecar)["original_shape"] == [8, 8, 8]

    mask = read_volume_cache(tmp_path / write_volume_cache(binarize(small_labels), tmp_path / "mask")["file"])
    assert mask.count() == 6

    raw = tmp_path / "vol.raw"
    payload = bytearray(raw.read_bytes())
    payload[0] ^= 1
    raw.write_bytes(bytes(payload))
    with pytest.raises(ChecksumError):
        read_volume_cache(sidecar)


def test_sidecar_axis_order_is_checked(tmp_path, small_labels):
    info = write_volume_cache(small_labels, tmp_path / "vol")
    sidecar = tmp_path / info["file"]
    doc = json.loads(sidecar.read_text())
    doc["axis_order"] = ["H", "W", "L"]
    sidecar.write_text(json.dumps(doc))
    with pytest.raises(AxisOrderError):
        read_sidecar(sidecar)


def test_malformed_sidecar_reports_offset(tmp_path):
    sidecar = tmp_path / "broken.json"
    sidecar.write_text('{"shape": [1, 2, 3],, }')
    with pytest.raises(SidecarParseError) as info:
        read_sidecar(sidecar)
    assert info.value.offset == 20
    assert info.value.path == str(sidecar)


def test_missing_cache_file(tmp_path):
    with pytest.raises(MissingFileError):
        read_volume_cache(tmp_path / "nothing.json")


def test_mask_directory_merges_in_sorted_order(tmp_path):
    subject = tmp_path / "s0001" / "segmentations"
    subject.mkdir(parents=True)
    liver = np.zeros((4, 4, 4), dtype=bool)
    liver[0:2] = True
    spleen = np.zeros((4, 4, 4), dtype=bool)
    spleen[1:3] = True
    _write_mask(subject / "spleen.nii.gz", spleen)
    _write_mask(subject / "liver.nii.gz", liver)

    vol = load_mask_directory(tmp_path / "s0001")
    assert vol.class_table == {1: "liver", 2: "spleen"}
    assert vol.counts() == {1: 32, 2: 16}
    assert vol.spacing == pytest.approx((1.5, 1.5, 2.0))


def test_load_subjects_keys_by_file_stem(tmp_path, small_labels):
    save_nifti(small_labels, tmp_path / "case_b.nii.gz")
    save_nifti(small_labels.without_classes([2]), tmp_path / "case_a.nii.gz")
    subjects = load_subjects(tmp_path)
    assert list(subjects) == ["case_a", "case_b"]
    assert subjects["case_a"].present_classes() == (1, 3)
    with pytest.raises(MissingFileError):
        load_subjects(tmp_path / "absent")


def test_merge_classes_groups_by_pattern():
    data = np.array([[[1, 2, 3, 0]]], dtype=np.uint8)
    vol = LabelVolume(data=data, spacing=(1, 1, 1), class_table={1: "rib_left_1", 2: "rib_right_1", 3: "liver"})
    merged = merge_classes(vol, {"rib_cage": ["rib_*"]})
    assert merged.class_table == {1: "liver", 2: "rib_cage"}
    assert merged.data.ravel().tolist() == [2, 2, 1, 0]
