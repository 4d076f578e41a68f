"""Build (incomplete, complete) corpora by removing anatomies from segmentations."""

from __future__ import annotations

import fnmatch
import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ChecksumError,
    DataError,
    InvalidPolicyError,
    MissingFileError,
    NoCandidateError,
    OutOfRangeError,
)
from .ingest import read_volume_cache, write_volume_cache
from .utils import atomic_directory, atomic_output, canonical_json, check_keys, sha256_bytes, sha256_file
from .voxel import (
    BinaryVolume,
    FractionReference,
    LabelVolume,
    binarize,
    fraction_from_counts,
    resample_labels,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLIT_STREAM = 0x5B117
TRAIN = "train"
TEST = "test"

MULTICLASS_ANATOMIES = (
    "lung",
    "heart",
    "spleen",
    "stomach",
    "pancreas",
    "spine",
    "rib_cage",
    "liver",
    "kidney",
    "aorta",
    "autochthon",
    "pulmonary_artery",
)


class RemovalMode(str, Enum):
    THRESHOLD_CANDIDATES = "threshold_candidates"
    CUMULATIVE_TARGET = "cumulative_target"
    SINGLE_ANATOMY = "single_anatomy"
    SKELETON_ONLY = "skeleton_only"


THRESHOLD_MODES = (RemovalMode.THRESHOLD_CANDIDATES, RemovalMode.CUMULATIVE_TARGET)


@dataclass
class RemovalPolicy:
    """How incomplete instances are synthesized from one segmentation.

    In the threshold modes each subject yields ``instances_per_subject``
    variants per threshold; in the other modes it yields
    ``instances_per_subject`` variants in total.
    """

    thresholds: Tuple[float, ...] = (0.10, 0.20, 0.40)
    reference: FractionReference = FractionReference.TOTAL_FOREGROUND
    protected_classes: frozenset = frozenset()
    protected_names: Tuple[str, ...] = ()
    mode: RemovalMode = RemovalMode.THRESHOLD_CANDIDATES
    instances_per_subject: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.reference = FractionReference(self.reference)
        self.protected_classes = frozenset(int(c) for c in self.protected_classes)
        self.protected_names = tuple(str(n) for n in self.protected_names)
        self.mode = RemovalMode(self.mode)
        self.instances_per_subject = int(self.instances_per_subject)
        self.seed = int(self.seed)

    def validate(self, class_table: Optional[Mapping[int, str]] = None) -> None:
        if self.mode in THRESHOLD_MODES and not self.thresholds:
            raise InvalidPolicyError(f"Mode '{self.mode.value}' needs at least one threshold")
        if any(not 0.0 < t < 1.0 for t in self.thresholds):
            raise InvalidPolicyError(f"Thresholds must lie strictly in (0, 1), got {self.thresholds}")
        if self.instances_per_subject < 1:
            raise InvalidPolicyError(f"instances_per_subject must be >= 1, got {self.instances_per_subject}")
        if self.mode is RemovalMode.SKELETON_ONLY and not (self.protected_classes or self.protected_names):
            raise InvalidPolicyError("Mode 'skeleton_only' needs protected classes to keep")
        if class_table is not None:
            unknown = self.protected_classes - set(class_table)
            if unknown:
                raise InvalidPolicyError(f"Protected classes {sorted(unknown)} are not in the class table")

    def resolved(self, class_table: Mapping[int, str]) -> "RemovalPolicy":
        """Copy whose protected ids include every class matched by ``protected_names``."""

        if not self.protected_names:
            return self
        ids = self.protected_classes | protected_ids(class_table, self.protected_names)
        return replace(self, protected_classes=ids)

    def variant_thresholds(self) -> List[Optional[float]]:
        """Threshold tag of each variant m = 1..M, in order."""

        if self.mode in THRESHOLD_MODES:
            return [t for t in self.thresholds for _ in range(self.instances_per_subject)]
        return [None] * self.instances_per_subject

    @property
    def variants_per_subject(self) -> int:
        return len(self.variant_thresholds())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "thresholds": list(self.thresholds),
            "reference": self.reference.value,
            "protected_classes": sorted(self.protected_classes),
            "protected_names": list(self.protected_names),
            "mode": self.mode.value,
            "instances_per_subject": self.instances_per_subject,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RemovalPolicy":
        check_keys(data, cls.__dataclass_fields__, "removal policy")
        return cls(
            thresholds=tuple(data.get("thresholds", (0.10, 0.20, 0.40))),
            reference=data.get("reference", FractionReference.TOTAL_FOREGROUND.value),
            protected_classes=frozenset(data.get("protected_classes", ())),
            protected_names=tuple(data.get("protected_names", ())),
            mode=data.get("mode", RemovalMode.THRESHOLD_CANDIDATES.value),
            instances_per_subject=int(data.get("instances_per_subject", 1)),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class CompletionPair:
    """One incomplete instance x_n^m with its complete target y_n."""

    subject_id: str
    variant_id: int
    incomplete: LabelVolume
    complete: LabelVolume
    removed_classes: Tuple[int, ...]
    removed_fraction: float
    threshold: Optional[float] = None
    original_shape: Optional[Tuple[int, int, int]] = None
    native: Optional[LabelVolume] = None

    @property
    def key(self) -> Tuple[str, int]:
        return (self.subject_id, self.variant_id)

    def incomplete_binary(self) -> BinaryVolume:
        return binarize(self.incomplete)

    def complete_binary(self) -> BinaryVolume:
        return binarize(self.complete)

    def residual_mask(self) -> np.ndarray:
        """Voxels of y_n missing from x_n^m."""

        return (self.complete.data != 0) & (self.incomplete.data == 0)

    def native_target(self) -> Optional[BinaryVolume]:
        return binarize(self.native) if self.native is not None else None


@dataclass
class PairRecord:
    """Manifest entry referencing a pair's cached files."""

    subject_id: str
    variant_id: int
    threshold: Optional[float]
    removed_classes: Tuple[int, ...]
    removed_fraction: float
    original_shape: Optional[Tuple[int, int, int]]
    files: Dict[str, str] = field(default_factory=dict)
    checksums: Dict[str, str] = field(default_factory=dict)

    @property
    def key(self) -> Tuple[str, int]:
        return (self.subject_id, self.variant_id)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "variant_id": self.variant_id,
            "threshold": self.threshold,
            "removed_classes": list(self.removed_classes),
            "removed_fraction": self.removed_fraction,
            "original_shape": list(self.original_shape) if self.original_shape else None,
            "files": dict(sorted(self.files.items())),
            "checksums": dict(sorted(self.checksums.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PairRecord":
        shape = data.get("original_shape")
        return cls(
            subject_id=str(data["subject_id"]),
            variant_id=int(data["variant_id"]),
            threshold=None if data.get("threshold") is None else float(data["threshold"]),
            removed_classes=tuple(int(c) for c in data.get("removed_classes", ())),
            removed_fraction=float(data.get("removed_fraction", 0.0)),
            original_shape=tuple(int(s) for s in shape) if shape else None,
            files={str(k): str(v) for k, v in (data.get("files") or {}).items()},
            checksums={str(k): str(v) for k, v in (data.get("checksums") or {}).items()},
        )


@dataclass
class CorpusManifest:
    """Pairs, split, and policy of one corpus, plus where its files live."""

    pairs: List[PairRecord]
    split: Dict[str, str]
    policy: RemovalPolicy
    created_with_seed: int
    class_table: Dict[int, str] = field(default_factory=dict)
    target_shape: Optional[Tuple[int, int, int]] = None
    skipped: Dict[str, str] = field(default_factory=dict)
    root: Optional[Path] = None
    _loaded: Dict[Tuple[str, int], CompletionPair] = field(default_factory=dict, repr=False)

    def subjects(self, split: Optional[str] = None) -> List[str]:
        return sorted(sid for sid, part in self.split.items() if split is None or part == split)

    def records(self, split: Optional[str] = None) -> List[PairRecord]:
        keep = set(self.subjects(split))
        return [rec for rec in self.pairs if rec.subject_id in keep]

    def groups(self, split: Optional[str] = None) -> Dict[str, List[PairRecord]]:
        """Records grouped by subject, variants in order."""

        grouped: Dict[str, List[PairRecord]] = {}
        for rec in self.records(split):
            grouped.setdefault(rec.subject_id, []).append(rec)
        return {sid: sorted(recs, key=lambda r: r.variant_id) for sid, recs in sorted(grouped.items())}

    @property
    def num_classes(self) -> int:
        """Channel count for a multi-class head (background included)."""

        return max(self.class_table, default=0) + 1

    def pair(self, record: PairRecord) -> CompletionPair:
        """Return the pair for ``record``, loading and verifying cached files on first use."""

        cached = self._loaded.get(record.key)
        if cached is not None:
            return cached
        if self.root is None:
            raise DataError(f"Pair {record.key} is neither in memory nor backed by a corpus directory")
        volumes: Dict[str, Any] = {}
        for role in ("incomplete", "complete", "native"):
            name = record.files.get(role)
            if not name:
                volumes[role] = None
                continue
            volumes[role] = read_volume_cache(self.root / name, expected_sha256=record.checksums.get(role))
        pair = CompletionPair(
            subject_id=record.subject_id,
            variant_id=record.variant_id,
            incomplete=volumes["incomplete"],
            complete=volumes["complete"],
            removed_classes=record.removed_classes,
            removed_fraction=record.removed_fraction,
            threshold=record.threshold,
            original_shape=record.original_shape,
            native=volumes["native"],
        )
        self._loaded[record.key] = pair
        return pair

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "created_with_seed": self.created_with_seed,
            "policy": self.policy.to_dict(),
            "class_table": {str(k): v for k, v in sorted(self.class_table.items())},
            "target_shape": list(self.target_shape) if self.target_shape else None,
            "split": dict(sorted(self.split.items())),
            "skipped": dict(sorted(self.skipped.items())),
            "pairs": [rec.to_dict() for rec in sorted(self.pairs, key=lambda r: r.key)],
        }

    def to_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8")

    def checksum(self) -> str:
        """Digest of the manifest content (independent of where it is stored)."""

        return sha256_bytes(canonical_json(self.to_dict()).encode("utf-8"))


def subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    """Independent stream per subject; does not depend on subject order."""

    return np.random.default_rng([int(seed), zlib.crc32(subject_id.encode("utf-8"))])


def removal_candidates(
    vol: LabelVolume, policy: RemovalPolicy, threshold: float, counts: Optional[Mapping[int, int]] = None
) -> List[int]:
    """Non-protected present classes whose fraction reaches ``threshold``."""

    counts = vol.counts() if counts is None else counts
    return [
        cid
        for cid in sorted(counts)
        if cid not in policy.protected_classes
        and fraction_from_counts(counts, cid, policy.reference, grid_size=vol.data.size) >= threshold
    ]


def remove_anatomies(
    vol: LabelVolume,
    policy: RemovalPolicy,
    rng: np.random.Generator,
    threshold: Optional[float] = None,
) -> Tuple[LabelVolume, Tuple[int, ...], float]:
    """Erase anatomies according to ``policy``.

    Returns the incomplete volume, the removed class ids, and their combined
    fraction against ``policy.reference``.
    """

    policy.validate()
    if policy.mode is RemovalMode.SKELETON_ONLY and not policy.protected_classes:
        raise InvalidPolicyError("Protected names must be resolved to class ids before a skeleton_only removal")
    counts = vol.counts()
    removable = [cid for cid in sorted(counts) if cid not in policy.protected_classes]
    if not removable:
        raise InvalidPolicyError("Every present class is protected; nothing can be removed")
    mode = policy.mode
    if threshold is None and mode in THRESHOLD_MODES:
        threshold = policy.thresholds[0]

    if mode is RemovalMode.THRESHOLD_CANDIDATES:
        candidates = removal_candidates(vol, policy, threshold, counts)
        if not candidates:
            raise NoCandidateError(
                f"No removable class reaches {threshold:.0%} of the {policy.reference.value} population"
            )
        while True:
            chosen = rng.integers(0, 2, size=len(candidates)).astype(bool)
            if chosen.any():
                break
        removed = [cid for cid, keep in zip(candidates, chosen) if keep]
    elif mode is RemovalMode.CUMULATIVE_TARGET:
        order = [removable[i] for i in rng.permutation(len(removable))]
        removed, total = [], 0.0
        for cid in order:
            removed.append(cid)
            total += fraction_from_counts(counts, cid, policy.reference, grid_size=vol.data.size)
            if total >= threshold:
                break
        else:
            raise NoCandidateError(
                f"Removing every unprotected class reaches only {total:.1%}, below {threshold:.0%}"
            )
    elif mode is RemovalMode.SINGLE_ANATOMY:
        removed = [removable[int(rng.integers(len(removable)))]]
    else:
        removed = removable

    removed_ids = tuple(sorted(removed))
    fraction = float(
        sum(fraction_from_counts(counts, cid, policy.reference, grid_size=vol.data.size) for cid in removed_ids)
    )
    return vol.without_classes(removed_ids), removed_ids, fraction


def _split_subjects(subject_ids: Sequence[str], split_fraction: float, seed: int) -> Dict[str, str]:
    ordered = sorted(subject_ids)
    rng = np.random.default_rng([int(seed), SPLIT_STREAM])
    permuted = [ordered[i] for i in rng.permutation(len(ordered))]
    n_train = int(round(split_fraction * len(ordered)))
    n_train = min(max(n_train, 1), len(ordered) - 1)
    return {sid: (TRAIN if idx < n_train else TEST) for idx, sid in enumerate(permuted)}


def _subject_items(subjects: Union[Sequence[LabelVolume], Mapping[str, LabelVolume]]) -> List[Tuple[str, LabelVolume]]:
    if isinstance(subjects, Mapping):
        return sorted(subjects.items())
    return [(f"subject_{idx:04d}", vol) for idx, vol in enumerate(subjects, start=1)]


def build_subject_pairs(
    subject_id: str,
    vol: LabelVolume,
    policy: RemovalPolicy,
    target_shape: Optional[Sequence[int]] = None,
) -> List[CompletionPair]:
    """All variants of one subject; removal runs at native resolution."""

    rng = subject_rng(policy.seed, subject_id)
    complete = resample_labels(vol, target_shape) if target_shape else vol
    pairs: List[CompletionPair] = []
    for variant_id, threshold in enumerate(policy.variant_thresholds(), start=1):
        incomplete, removed, fraction = remove_anatomies(vol, policy, rng, threshold=threshold)
        if target_shape:
            incomplete = resample_labels(incomplete, target_shape)
        pairs.append(
            CompletionPair(
                subject_id=subject_id,
                variant_id=variant_id,
                incomplete=incomplete,
                complete=complete,
                removed_classes=removed,
                removed_fraction=fraction,
                threshold=threshold,
                original_shape=vol.shape,
                native=vol,
            )
        )
    return pairs


def _record_for(pair: CompletionPair) -> PairRecord:
    checksums = {
        "incomplete": sha256_bytes(np.ascontiguousarray(pair.incomplete.data).tobytes()),
        "complete": sha256_bytes(np.ascontiguousarray(pair.complete.data).tobytes()),
    }
    if pair.native is not None:
        checksums["native"] = sha256_bytes(np.ascontiguousarray(pair.native.data).tobytes())
    return PairRecord(
        subject_id=pair.subject_id,
        variant_id=pair.variant_id,
        threshold=pair.threshold,
        removed_classes=pair.removed_classes,
        removed_fraction=pair.removed_fraction,
        original_shape=pair.original_shape,
        checksums=checksums,
    )


def build_corpus(
    subjects: Union[Sequence[LabelVolume], Mapping[str, LabelVolume]],
    policy: RemovalPolicy,
    split_fraction: float,
    *,
    target_shape: Optional[Sequence[int]] = None,
) -> CorpusManifest:
    """Emit every variant of every subject and split subjects into train/test.

    Subjects whose removal fails are recorded in ``skipped`` with the reason.
    """

    items = _subject_items(subjects)
    if len(items) < 2:
        raise DataError(f"A corpus needs at least 2 subjects, got {len(items)}")
    if not 0.0 < split_fraction < 1.0:
        raise DataError(f"split_fraction must lie strictly in (0, 1), got {split_fraction}")
    class_table: Dict[int, str] = {}
    for _, vol in items:
        class_table.update(vol.class_table)
    policy = policy.resolved(class_table)
    policy.validate(class_table)

    records: List[PairRecord] = []
    loaded: Dict[Tuple[str, int], CompletionPair] = {}
    skipped: Dict[str, str] = {}
    for idx, (subject_id, vol) in enumerate(items, start=1):
        try:
            pairs = build_subject_pairs(subject_id, vol, policy, target_shape)
        except (NoCandidateError, InvalidPolicyError) as exc:
            skipped[subject_id] = str(exc)
            logger.warning("[%d/%d] Skipped %s: %s", idx, len(items), subject_id, exc)
            continue
        logger.info("[%d/%d] %s: %d variant(s)", idx, len(items), subject_id, len(pairs))
        for pair in pairs:
            records.append(_record_for(pair))
            loaded[pair.key] = pair

    kept = sorted({rec.subject_id for rec in records})
    if len(kept) < 2:
        raise DataError(f"Only {len(kept)} subject(s) survived removal; skipped: {skipped}")
    return CorpusManifest(
        pairs=records,
        split=_split_subjects(kept, split_fraction, policy.seed),
        policy=policy,
        created_with_seed=policy.seed,
        class_table=class_table,
        target_shape=tuple(int(s) for s in target_shape) if target_shape else None,
        skipped=skipped,
        _loaded=loaded,
    )


def save_pair(pair: CompletionPair, directory: Path) -> PairRecord:
    """Write a pair's volumes into ``directory/<subject_id>/`` and return its record."""

    directory = Path(directory)
    subject_dir = directory / pair.subject_id
    subject_dir.mkdir(parents=True, exist_ok=True)
    extra = {"original_shape": list(pair.original_shape)} if pair.original_shape else None
    written = {
        "incomplete": write_volume_cache(pair.incomplete, subject_dir / f"v{pair.variant_id:02d}_incomplete", extra=extra),
        "complete": write_volume_cache(pair.complete, subject_dir / "complete", extra=extra),
    }
    if pair.native is not None:
        written["native"] = write_volume_cache(pair.native, subject_dir / "native")
    record = _record_for(pair)
    record.files = {role: f"{pair.subject_id}/{info['file']}" for role, info in written.items()}
    for role, info in written.items():
        if record.checksums.get(role) != info["sha256"]:
            raise ChecksumError(f"Cached {role} volume for {pair.key} does not match its in-memory digest")
    return record


def write_manifest(manifest: CorpusManifest, path: Path) -> Path:
    path = Path(path)
    with atomic_output(path) as tmp:
        tmp.write_bytes(manifest.to_bytes())
    return path


def write_corpus(manifest: CorpusManifest, directory: Path) -> Path:
    """Persist every pair plus ``manifest.json`` and swap them in as ``directory``.

    The corpus is assembled in a temp sibling; an existing ``directory`` is
    replaced whole, so stale subjects never outlive a rewrite.
    """

    directory = Path(directory)
    records: List[PairRecord] = []
    with atomic_directory(directory) as staging:
        for rec in sorted(manifest.pairs, key=lambda r: r.key):
            records.append(save_pair(manifest.pair(rec), staging))
        written = replace(manifest, pairs=records, root=staging)
        write_manifest(written, staging / MANIFEST_NAME)
    manifest.pairs = records
    manifest.root = directory
    return directory / MANIFEST_NAME


def load_manifest(path: Path, *, verify: bool = True) -> CorpusManifest:
    """Load ``manifest.json`` and check that every referenced file exists and matches."""

    from .ingest import _parse_json

    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise MissingFileError(path)
    raw = _parse_json(path)
    if not isinstance(raw, dict) or raw.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"{path} is not a version-{MANIFEST_SCHEMA_VERSION} corpus manifest")
    root = path.parent
    pairs = [PairRecord.from_dict(item) for item in raw.get("pairs", [])]
    if verify:
        for rec in pairs:
            for role, name in rec.files.items():
                target = root / name
                raw_file = target.with_suffix(".raw")
                for needed in (target, raw_file):
                    if not needed.exists():
                        raise MissingFileError(needed)
                expected = rec.checksums.get(role)
                if expected and sha256_file(raw_file) != expected:
                    raise ChecksumError(f"Checksum mismatch for {raw_file}")
    shape = raw.get("target_shape")
    split = {str(k): str(v) for k, v in (raw.get("split") or {}).items()}
    overlap = [sid for sid, part in split.items() if part not in (TRAIN, TEST)]
    if overlap:
        raise DataError(f"Unknown split labels for subjects {overlap}")
    return CorpusManifest(
        pairs=pairs,
        split=split,
        policy=RemovalPolicy.from_dict(raw.get("policy") or {}),
        created_with_seed=int(raw.get("created_with_seed", 0)),
        class_table={int(k): str(v) for k, v in (raw.get("class_table") or {}).items()},
        target_shape=tuple(int(s) for s in shape) if shape else None,
        skipped={str(k): str(v) for k, v in (raw.get("skipped") or {}).items()},
        root=root,
    )


def select_classes(vol: LabelVolume, names: Iterable[str]) -> LabelVolume:
    """Keep only the named classes, relabelled densely 1..K in the given order."""

    names = list(names)
    lookup = {name: cid for cid, name in vol.class_table.items()}
    missing = [name for name in names if name not in lookup]
    if missing:
        raise OutOfRangeError(f"Anatomies {missing} are not in the class table")
    lut = np.zeros(256, dtype=np.uint8)
    for new_id, name in enumerate(names, start=1):
        lut[lookup[name]] = new_id
    return LabelVolume(
        data=lut[vol.data],
        spacing=vol.spacing,
        class_table={new_id: name for new_id, name in enumerate(names, start=1)},
        affine=vol.affine,
    )


def protected_ids(class_table: Mapping[int, str], patterns: Sequence[str]) -> frozenset:
    """Resolve protected anatomy names (``fnmatch`` patterns) against a class table."""

    ids = {cid for cid, name in class_table.items() if any(fnmatch.fnmatchcase(name, p) for p in patterns)}
    unmatched = [p for p in patterns if not any(fnmatch.fnmatchcase(n, p) for n in class_table.values())]
    if unmatched:
        raise InvalidPolicyError(f"Protected patterns {unmatched} match no anatomy")
    return frozenset(ids)


__all__ = [
    "CompletionPair",
    "CorpusManifest",
    "MULTICLASS_ANATOMIES",
    "PairRecord",
    "RemovalMode",
    "RemovalPolicy",
    "build_corpus",
    "build_subject_pairs",
    "load_manifest",
    "protected_ids",
    "remove_anatomies",
    "removal_candidates",
    "save_pair",
    "select_classes",
    "subject_rng",
    "write_corpus",
    "write_manifest",
]
