"""Read and write label volumes: NIfTI files, mask folders, and the raw cache."""

from __future__ import annotations

import fnmatch
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import nibabel as nib
import numpy as np

from .errors import (
    AxisOrderError,
    ChecksumError,
    DataError,
    InvalidVolumeError,
    MissingFileError,
    SidecarParseError,
)
from .utils import atomic_output, sha256_bytes
from .voxel import AXIS_ORDER, BinaryVolume, LabelVolume

logger = logging.getLogger(__name__)

CACHE_SCHEMA_VERSION = 1
NIFTI_SUFFIXES = (".nii.gz", ".nii")
LABELS_SUFFIX = ".labels.json"

Volume = Union[LabelVolume, BinaryVolume]


def _strip_nifti_suffix(name: str) -> str:
    for suffix in NIFTI_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def is_nifti(path: Path) -> bool:
    return path.is_file() and path.name.endswith(NIFTI_SUFFIXES)


def labels_path_for(path: Path) -> Path:
    return path.with_name(_strip_nifti_suffix(path.name) + LABELS_SUFFIX)


def _load_image(path: Path) -> "nib.Nifti1Image":
    if not path.exists():
        raise MissingFileError(path)
    try:
        return nib.load(str(path))
    except Exception as exc:
        raise DataError(f"Malformed NIfTI header in {path}: {exc}") from exc


def _read_array(image: "nib.Nifti1Image", path: Path) -> np.ndarray:
    try:
        data = np.asanyarray(image.dataobj)
    except Exception as exc:
        raise DataError(f"Could not read voxel data from {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise InvalidVolumeError(f"{path} holds a {data.ndim}D image, expected 3D")
    return data


def _read_class_table(path: Path, present: Sequence[int]) -> Dict[int, str]:
    sidecar = labels_path_for(path)
    if sidecar.exists():
        raw = _parse_json(sidecar)
        table = raw.get("class_table") if isinstance(raw, dict) else None
        if not isinstance(table, dict):
            raise DataError(f"{sidecar} has no 'class_table' object")
        return {int(k): str(v) for k, v in table.items()}
    return {int(cid): f"class_{int(cid)}" for cid in present if cid != 0}


def load_nifti_labels(path: Path) -> LabelVolume:
    """Load one multi-label NIfTI file (plus its optional ``.labels.json``)."""

    path = Path(path)
    image = _load_image(path)
    data = _read_array(image, path)
    spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
    present = [int(v) for v in np.unique(np.rint(data))]
    return LabelVolume(
        data=data,
        spacing=spacing,
        class_table=_read_class_table(path, present),
        affine=np.asarray(image.affine)[:3, :],
    )


def mask_dir_for(path: Path) -> Path:
    nested = path / "segmentations"
    return nested if nested.is_dir() else path


def anatomy_names(path: Path) -> List[str]:
    return sorted(_strip_nifti_suffix(p.name) for p in mask_dir_for(path).iterdir() if is_nifti(p))


def load_mask_directory(path: Path, names: Optional[Sequence[str]] = None) -> LabelVolume:
    """Merge per-anatomy binary masks into one label volume.

    Class ids follow the order of ``names`` (default: sorted file stems), so
    subjects sharing ``names`` share a class table. Voxels claimed by more than
    one mask keep the first class.
    """

    path = Path(path)
    mask_dir = mask_dir_for(path)
    names = list(names) if names is not None else anatomy_names(path)
    if not names:
        raise InvalidVolumeError(f"No NIfTI masks found in {mask_dir}")
    labels: Optional[np.ndarray] = None
    spacing: Optional[tuple] = None
    affine: Optional[np.ndarray] = None
    overlap = 0
    for class_id, name in enumerate(names, start=1):
        mask_path = mask_dir / f"{name}.nii.gz"
        if not mask_path.exists():
            mask_path = mask_dir / f"{name}.nii"
        if not mask_path.exists():
            logger.debug("Subject %s has no mask for %s", path.name, name)
            continue
        image = _load_image(mask_path)
        mask = _read_array(image, mask_path) > 0.5
        if labels is None:
            labels = np.zeros(mask.shape, dtype=np.uint8)
            spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
            affine = np.asarray(image.affine)[:3, :]
        elif mask.shape != labels.shape:
            raise InvalidVolumeError(f"{mask_path} has shape {mask.shape}, expected {labels.shape}")
        overlap += int(np.count_nonzero(mask & (labels != 0)))
        labels[mask & (labels == 0)] = class_id
    if labels is None:
        raise InvalidVolumeError(f"None of the requested masks exist in {mask_dir}")
    if overlap:
        logger.warning("%s: %d voxels claimed by more than one mask kept their first class", path.name, overlap)
    table = {cid: name for cid, name in enumerate(names, start=1)}
    return LabelVolume(data=labels, spacing=spacing, class_table=table, affine=affine)


def load_nifti_subject(path: Path, names: Optional[Sequence[str]] = None) -> LabelVolume:
    """Load a subject from a multi-label file or a folder of per-anatomy masks."""

    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    if path.is_dir():
        return load_mask_directory(path, names=names)
    return load_nifti_labels(path)


def subject_id_for(path: Path) -> str:
    return _strip_nifti_suffix(path.name)


def load_subjects(input_dir: Path) -> Dict[str, LabelVolume]:
    """Load every subject (file or mask folder) under ``input_dir``, keyed by id."""

    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise MissingFileError(input_dir)
    entries = sorted(p for p in input_dir.iterdir() if is_nifti(p) or p.is_dir())
    folders = [p for p in entries if p.is_dir()]
    names: Optional[List[str]] = None
    if folders:
        names = sorted({name for folder in folders for name in anatomy_names(folder)})
    subjects: Dict[str, LabelVolume] = {}
    for idx, entry in enumerate(entries, start=1):
        logger.info("[%d/%d] Loading %s", idx, len(entries), entry.name)
        subjects[subject_id_for(entry)] = load_nifti_subject(entry, names=names if entry.is_dir() else None)
    return subjects


def save_nifti(vol: Volume, path: Path) -> Path:
    """Write a volume as NIfTI; label volumes also get a ``.labels.json`` sidecar."""

    path = Path(path)
    if isinstance(vol, LabelVolume):
        affine = np.vstack([vol.affine, [0.0, 0.0, 0.0, 1.0]])
    else:
        affine = np.diag([*vol.spacing, 1.0])
    image = nib.Nifti1Image(np.asarray(vol.data, dtype=np.uint8), affine)
    image.header.set_data_dtype(np.uint8)
    image.header.set_zooms(vol.spacing)
    suffix = ".nii.gz" if path.name.endswith(".gz") else ".nii"
    with atomic_output(path) as tmp:
        staged = tmp.with_name(tmp.name + suffix)
        nib.save(image, str(staged))
        staged.replace(tmp)
    if isinstance(vol, LabelVolume):
        payload = {"schema_version": CACHE_SCHEMA_VERSION, "class_table": {str(k): v for k, v in vol.class_table.items()}}
        with atomic_output(labels_path_for(path)) as tmp:
            tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _parse_json(path: Path) -> Any:
    raw = path.read_bytes()
    text = raw.decode("utf-8", errors="replace")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise SidecarParseError(
            f"Could not parse {path} at byte offset {offset}: {exc.msg}", path=str(path), offset=offset
        ) from exc


def cache_paths(stem: Path) -> tuple:
    stem = Path(stem)
    return stem.with_name(stem.name + ".raw"), stem.with_name(stem.name + ".json")


def write_volume_cache(vol: Volume, stem: Path, *, extra: Optional[Mapping[str, Any]] = None) -> Dict[str, str]:
    """Write ``<stem>.raw`` (little-endian uint8, C order) and ``<stem>.json``.

    Returns the sidecar file name and the SHA-256 of the raw bytes.
    """

    raw_path, sidecar_path = cache_paths(stem)
    payload = np.ascontiguousarray(vol.data, dtype="<u1").tobytes(order="C")
    digest = sha256_bytes(payload)
    sidecar: Dict[str, Any] = {
        "schema_version": CACHE_SCHEMA_VERSION,
        "kind": "label" if isinstance(vol, LabelVolume) else "binary",
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "axis_order": list(AXIS_ORDER),
        "dtype": "uint8",
        "byte_order": "little",
        "sha256": digest,
    }
    if isinstance(vol, LabelVolume):
        sidecar["class_table"] = {str(k): v for k, v in sorted(vol.class_table.items())}
        sidecar["affine"] = np.asarray(vol.affine).tolist()
    if extra:
        sidecar.update(extra)
    with atomic_output(raw_path) as tmp:
        tmp.write_bytes(payload)
    with atomic_output(sidecar_path) as tmp:
        tmp.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"file": sidecar_path.name, "sha256": digest}


def read_sidecar(sidecar_path: Path) -> Dict[str, Any]:
    sidecar_path = Path(sidecar_path)
    if not sidecar_path.exists():
        raise MissingFileError(sidecar_path)
    sidecar = _parse_json(sidecar_path)
    if not isinstance(sidecar, dict):
        raise SidecarParseError(f"{sidecar_path} must hold a JSON object", path=str(sidecar_path), offset=0)
    order = sidecar.get("axis_order")
    if order is None or list(order) != list(AXIS_ORDER):
        raise AxisOrderError(f"{sidecar_path} declares axis order {order!r}, expected {list(AXIS_ORDER)}")
    for key in ("shape", "spacing", "kind"):
        if key not in sidecar:
            raise SidecarParseError(f"{sidecar_path} lacks '{key}'", path=str(sidecar_path), offset=0)
    return sidecar


def read_volume_cache(sidecar_path: Path, *, expected_sha256: Optional[str] = None) -> Volume:
    """Load a cached volume, verifying size and checksum."""

    sidecar_path = Path(sidecar_path)
    sidecar = read_sidecar(sidecar_path)
    raw_path = sidecar_path.with_suffix(".raw")
    if not raw_path.exists():
        raise MissingFileError(raw_path)
    payload = raw_path.read_bytes()
    digest = sha256_bytes(payload)
    for expected in (sidecar.get("sha256"), expected_sha256):
        if expected and expected != digest:
            raise ChecksumError(f"Checksum mismatch for {raw_path}: expected {expected}, got {digest}")
    shape = tuple(int(s) for s in sidecar["shape"])
    if len(payload) != int(np.prod(shape)):
        raise DataError(f"{raw_path} holds {len(payload)} bytes, expected {int(np.prod(shape))} for {shape}")
    data = np.frombuffer(payload, dtype="<u1").reshape(shape, order="C")
    spacing = tuple(float(s) for s in sidecar["spacing"])
    if sidecar["kind"] == "binary":
        return BinaryVolume(data=data, spacing=spacing)
    table = {int(k): str(v) for k, v in (sidecar.get("class_table") or {}).items()}
    affine = np.asarray(sidecar["affine"], dtype=np.float64) if "affine" in sidecar else None
    return LabelVolume(data=data, spacing=spacing, class_table=table, affine=affine)


def merge_classes(vol: LabelVolume, groups: Mapping[str, Sequence[str]]) -> LabelVolume:
    """Collapse source classes into named groups and relabel densely.

    ``groups`` maps a new name to ``fnmatch`` patterns over source names
    (``{"rib_cage": ["rib_*"]}``). Ungrouped classes keep their names. Ids are
    reassigned 1..K in sorted-name order.
    """

    source_to_target: Dict[int, str] = {}
    for cid, name in vol.class_table.items():
        target = name
        for group, patterns in groups.items():
            if any(fnmatch.fnmatchcase(name, pattern) for pattern in patterns):
                target = group
                break
        source_to_target[cid] = target
    targets = sorted(set(source_to_target.values()))
    new_ids = {name: idx for idx, name in enumerate(targets, start=1)}
    lut = np.zeros(256, dtype=np.uint8)
    for cid, target in source_to_target.items():
        lut[cid] = new_ids[target]
    return LabelVolume(
        data=lut[vol.data],
        spacing=vol.spacing,
        class_table={idx: name for name, idx in new_ids.items()},
        affine=vol.affine,
    )


__all__ = [
    "cache_paths",
    "load_mask_directory",
    "load_nifti_labels",
    "load_nifti_subject",
    "load_subjects",
    "merge_classes",
    "read_sidecar",
    "read_volume_cache",
    "save_nifti",
    "subject_id_for",
    "write_volume_cache",
]
