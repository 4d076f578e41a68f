"""Quantitative evaluation: native-resolution DSC, single-anatomy scores and t-tests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy import stats

from .checkpoint import Checkpoint, load_checkpoint
from .corpus import TEST, TRAIN, CompletionPair, CorpusManifest, RemovalMode, load_manifest
from .errors import AlignmentError, EvaluationError, MissingFileError
from .network import completion_labels, compose_completion, forward
from .objective import dice_coefficient
from .render import RenderResult, render_montage
from .utils import atomic_output, write_json
from .voxel import BinaryVolume, binarize, nearest_resample, upscale_binary

logger = logging.getLogger(__name__)

TEST_SETS = {0.10: "D_test1", 0.20: "D_test2", 0.40: "D_test3"}
SINGLE_ANATOMY_SET = "D_test4"
SKELETON_SET = "skeleton"

VOLUME = "volume"
CLASS = "class"
MACRO = "macro"

ROW_COLUMNS = [
    "subject_id",
    "variant_id",
    "threshold",
    "test_set",
    "scope",
    "class_name",
    "dsc",
    "region_dsc",
    "removed_fraction",
]

# Published mean (SD) DSC and pairwise p-values on the whole-body CT corpus.
PUBLISHED_REFERENCE: Dict[str, Any] = {
    "dsc": {
        "dae_b": {"D_test1": (0.783, 0.075), "D_test2": (0.778, 0.061), "D_test3": (0.757, 0.058)},
        "dae_agg": {"D_test1": (0.789, 0.073), "D_test2": (0.803, 0.059), "D_test3": (0.812, 0.053)},
        "dae_res": {"D_test1": (0.865, 0.069), "D_test2": (0.885, 0.046), "D_test3": (0.887, 0.047)},
        "dae_agg_res": {"D_test1": (0.865, 0.074), "D_test2": (0.904, 0.039), "D_test3": (0.931, 0.030)},
    },
    "p_values": {
        ("dae_agg", "dae_b"): {"D_test1": 0.328, "D_test2": 4.301e-07, "D_test3": 8.176e-29},
        ("dae_res", "dae_b"): {"D_test1": 2.839e-35, "D_test2": 2.147e-86, "D_test3": 7.427e-114},
        ("dae_agg_res", "dae_b"): {"D_test1": 2.295e-33, "D_test2": 1.437e-110, "D_test3": 2.985e-163},
        ("dae_res", "dae_agg"): {"D_test1": 9.931e-32, "D_test2": 3.051e-59, "D_test3": 5.644e-57},
        ("dae_agg_res", "dae_res"): {"D_test1": 0.989, "D_test2": 2.866e-07, "D_test3": 1.797e-34},
    },
}

TABLE_PAIRS: Tuple[Tuple[str, str], ...] = tuple(PUBLISHED_REFERENCE["p_values"])
METHOD_ORDER = ("dae_b", "dae_agg", "dae_res", "dae_agg_res")


def assign_test_set(threshold: Optional[float], mode: RemovalMode = RemovalMode.THRESHOLD_CANDIDATES) -> str:
    """Name of the test set a pair belongs to, by its threshold tag."""

    if mode is RemovalMode.SINGLE_ANATOMY:
        return SINGLE_ANATOMY_SET
    if mode is RemovalMode.SKELETON_ONLY or threshold is None:
        return SKELETON_SET
    for value, name in TEST_SETS.items():
        if abs(threshold - value) < 1e-9:
            return name
    return f"threshold_{threshold:.2f}"


def mask_dsc(target: np.ndarray, prediction: np.ndarray) -> float:
    """Unsmoothed Dice coefficient of two masks; two empty masks score 1."""

    a = np.asarray(target).astype(bool)
    b = np.asarray(prediction).astype(bool)
    if a.shape != b.shape:
        raise EvaluationError(f"DSC operands differ in shape: {a.shape} vs {b.shape}")
    return float(dice_coefficient(a.astype(np.float64), b.astype(np.float64), eps=0.0))


@dataclass
class EvalReport:
    rows: pd.DataFrame
    metadata: Dict[str, Any] = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: Iterable[Mapping[str, Any]], **kwargs: Any) -> "EvalReport":
        frame = pd.DataFrame(list(rows), columns=ROW_COLUMNS)
        frame = frame.sort_values(["subject_id", "variant_id", "scope", "class_name"], kind="mergesort")
        return cls(rows=frame.reset_index(drop=True), **kwargs)

    def primary(self) -> pd.DataFrame:
        """One row per evaluated pair: whole-volume rows, or the macro row for multi-class."""

        return self.rows[self.rows["scope"].isin([VOLUME, MACRO])]

    def summary(self) -> pd.DataFrame:
        """Mean, SD (ddof=1), count and mean combined missing ratio per test set and class."""

        grouped = self.rows.groupby(["test_set", "scope", "class_name"], sort=True)
        out = grouped.agg(
            mean=("dsc", "mean"),
            sd=("dsc", lambda s: float(s.std(ddof=1)) if len(s) > 1 else float("nan")),
            n=("dsc", "size"),
            region_mean=("region_dsc", "mean"),
            missing_ratio=("removed_fraction", "mean"),
        )
        return out.reset_index()

    def test_set_means(self) -> Dict[str, Tuple[float, float]]:
        frame = self.primary()
        result: Dict[str, Tuple[float, float]] = {}
        for name, group in frame.groupby("test_set", sort=True):
            values = group["dsc"].to_numpy(dtype=np.float64)
            sd = float(np.std(values, ddof=1)) if values.size > 1 else float("nan")
            result[str(name)] = (float(values.mean()), sd)
        return result

    def aggregates(self) -> Dict[str, Any]:
        summary = self.summary()
        records = json.loads(summary.to_json(orient="records", double_precision=15))
        return {
            "metadata": self.metadata,
            "summary": records,
            "errors": dict(sorted(self.errors.items())),
            "notes": list(self.notes),
        }


def _resolve_checkpoint(checkpoint: Union[Checkpoint, Path, str], device: Optional[torch.device]) -> Checkpoint:
    if isinstance(checkpoint, Checkpoint):
        return checkpoint
    return load_checkpoint(Path(checkpoint), device=device)


def _resolve_manifest(manifest: Union[CorpusManifest, Path, str]) -> CorpusManifest:
    if isinstance(manifest, CorpusManifest):
        return manifest
    return load_manifest(Path(manifest))


def _check_alignment(ckpt: Checkpoint, manifest: CorpusManifest) -> None:
    shape = manifest.target_shape
    if shape is not None and tuple(shape) != ckpt.dae_config.input_shape:
        raise EvaluationError(
            f"Checkpoint expects {ckpt.dae_config.input_shape} inputs, corpus was prepared at {tuple(shape)}"
        )
    if ckpt.manifest_checksum and ckpt.manifest_checksum != manifest.checksum():
        logger.warning("Evaluating on a corpus other than the one the checkpoint was trained on")


def _metadata(ckpt: Checkpoint, manifest: CorpusManifest, split: Optional[str]) -> Dict[str, Any]:
    return {
        "checkpoint": str(ckpt.path) if ckpt.path else "",
        "checkpoint_sha256": ckpt.digest,
        "experiment": ckpt.experiment,
        "config_hash": ckpt.config_hash,
        "manifest_checksum": manifest.checksum(),
        "split": split or "all",
        "upscaling": "nearest",
        "threshold": ckpt.dae_config.threshold,
    }


def complete_pair(ckpt: Checkpoint, pair: CompletionPair) -> BinaryVolume:
    """Binary completion of a pair at network resolution."""

    out = forward(ckpt.model, pair.incomplete)
    return compose_completion(pair.incomplete_binary(), out, ckpt.dae_config.threshold)


def _pair_rows(ckpt: Checkpoint, pair: CompletionPair, test_set: str, class_table: Mapping[int, str]) -> List[Dict]:
    base = {
        "subject_id": pair.subject_id,
        "variant_id": pair.variant_id,
        "threshold": pair.threshold,
        "test_set": test_set,
        "region_dsc": float("nan"),
        "removed_fraction": pair.removed_fraction,
    }
    if ckpt.dae_config.is_binary:
        completion = upscale_binary(complete_pair(ckpt, pair), pair.original_shape)
        target = binarize(pair.native)
        return [{**base, "scope": VOLUME, "class_name": "all", "dsc": mask_dsc(target.data, completion.data)}]

    labels = nearest_resample(completion_labels(forward(ckpt.model, pair.incomplete)), pair.original_shape)
    truth = pair.native.data
    rows, scores = [], []
    for cid in range(1, ckpt.dae_config.num_classes):
        in_truth, in_pred = truth == cid, labels == cid
        if not in_truth.any() and not in_pred.any():
            continue
        score = mask_dsc(in_truth, in_pred)
        scores.append(score)
        rows.append({**base, "scope": CLASS, "class_name": class_table.get(cid, f"class_{cid}"), "dsc": score})
    macro = float(np.mean(scores)) if scores else 1.0
    rows.append({**base, "scope": MACRO, "class_name": MACRO, "dsc": macro})
    return rows


def evaluate(
    checkpoint: Union[Checkpoint, Path, str],
    manifest: Union[CorpusManifest, Path, str],
    test_sets: Optional[Sequence[str]] = None,
    *,
    split: Optional[str] = TEST,
    device: Optional[torch.device] = None,
) -> EvalReport:
    """Score every pair of ``split`` at its original resolution, grouped into test sets."""

    ckpt = _resolve_checkpoint(checkpoint, device)
    manifest = _resolve_manifest(manifest)
    _check_alignment(ckpt, manifest)
    wanted = set(test_sets) if test_sets else None
    rows: List[Dict[str, Any]] = []
    errors: Dict[str, str] = {}
    records = sorted(manifest.records(split), key=lambda r: r.key)
    for idx, rec in enumerate(records, start=1):
        test_set = assign_test_set(rec.threshold, manifest.policy.mode)
        if wanted is not None and test_set not in wanted:
            continue
        key = f"{rec.subject_id}/v{rec.variant_id:02d}"
        pair = manifest.pair(rec)
        if pair.original_shape is None or pair.native is None:
            errors[key] = "missing original-shape metadata"
            logger.warning("Skipping %s: missing original-shape metadata", key)
            continue
        rows.extend(_pair_rows(ckpt, pair, test_set, manifest.class_table))
        logger.debug("[%d/%d] Evaluated %s", idx, len(records), key)
    report = EvalReport.from_rows(rows, metadata=_metadata(ckpt, manifest, split), errors=errors)
    logger.info("Evaluated %d pair(s) of %s", len(report.primary()), ckpt.experiment or "checkpoint")
    return report


def evaluate_single_anatomy(
    checkpoint: Union[Checkpoint, Path, str],
    manifest: Union[CorpusManifest, Path, str],
    *,
    render_dir: Optional[Path] = None,
    plane: str = "coronal",
    split: Optional[str] = None,
    device: Optional[torch.device] = None,
) -> Tuple[EvalReport, List[RenderResult]]:
    """Whole-volume and removed-region DSC per removed anatomy, plus one panel per anatomy."""

    ckpt = _resolve_checkpoint(checkpoint, device)
    manifest = _resolve_manifest(manifest)
    if manifest.policy.mode is not RemovalMode.SINGLE_ANATOMY:
        raise EvaluationError(f"Corpus was built with mode '{manifest.policy.mode.value}', not single_anatomy")
    if not ckpt.dae_config.is_binary:
        raise EvaluationError("Single-anatomy evaluation needs a binary checkpoint")
    _check_alignment(ckpt, manifest)

    rows: List[Dict[str, Any]] = []
    errors: Dict[str, str] = {}
    panels: List[RenderResult] = []
    seen: set = set()
    for rec in sorted(manifest.records(split), key=lambda r: r.key):
        key = f"{rec.subject_id}/v{rec.variant_id:02d}"
        pair = manifest.pair(rec)
        if pair.original_shape is None or pair.native is None:
            errors[key] = "missing original-shape metadata"
            logger.warning("Skipping %s: missing original-shape metadata", key)
            continue
        cid = rec.removed_classes[0]
        name = manifest.class_table.get(cid, f"class_{cid}")
        completion = complete_pair(ckpt, pair)
        upscaled = upscale_binary(completion, pair.original_shape)
        native_input = pair.native.without_classes(rec.removed_classes).data != 0
        region = pair.native.data == cid
        reconstructed = upscaled.mask & ~native_input
        rows.append(
            {
                "subject_id": rec.subject_id,
                "variant_id": rec.variant_id,
                "threshold": rec.threshold,
                "test_set": SINGLE_ANATOMY_SET,
                "scope": VOLUME,
                "class_name": name,
                "dsc": mask_dsc(pair.native.data != 0, upscaled.data),
                "region_dsc": mask_dsc(region, reconstructed),
                "removed_fraction": rec.removed_fraction,
            }
        )
        if render_dir is not None and name not in seen:
            seen.add(name)
            panels.append(
                render_slices(
                    pair, completion, plane, Path(render_dir) / f"{name}_{plane}.png", title=f"{name} ({rec.subject_id})"
                )
            )

    removed = {manifest.class_table.get(c) for r in manifest.records(split) for c in r.removed_classes}
    protected = manifest.policy.protected_classes
    scope = {TEST: "test", TRAIN: "training"}.get(split or "", "evaluated")
    notes = [
        f"No {scope} pair removes '{name}'"
        for cid, name in sorted(manifest.class_table.items())
        if cid not in protected and name not in removed
    ]
    for note in notes:
        logger.info(note)
    metadata = _metadata(ckpt, manifest, split)
    report = EvalReport.from_rows(rows, metadata=metadata, errors=errors, notes=notes)
    return report, panels


def render_slices(
    pair: CompletionPair, completion: BinaryVolume, plane: str, path: Path, **kwargs: Any
) -> RenderResult:
    """Montage of a pair's completion at network resolution."""

    return render_montage(pair.incomplete_binary(), pair.complete_binary(), completion, plane, path, **kwargs)


@dataclass
class ComparisonEntry:
    test_set: str
    n: int
    mean_difference: float
    statistic: float
    p_value: float
    degenerate: bool = False


@dataclass
class ComparisonReport:
    model_a: str
    model_b: str
    test: str
    alternative: str
    entries: List[ComparisonEntry] = field(default_factory=list)

    def p_values(self) -> Dict[str, float]:
        return {e.test_set: e.p_value for e in self.entries}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model_a": self.model_a,
            "model_b": self.model_b,
            "test": self.test,
            "alternative": self.alternative,
            "entries": [
                {
                    "test_set": e.test_set,
                    "n": e.n,
                    "mean_difference": e.mean_difference,
                    "statistic": None if not np.isfinite(e.statistic) else e.statistic,
                    "p_value": e.p_value,
                    "degenerate": e.degenerate,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ComparisonReport":
        entries = [
            ComparisonEntry(
                test_set=item["test_set"],
                n=int(item["n"]),
                mean_difference=float(item["mean_difference"]),
                statistic=float("nan") if item.get("statistic") is None else float(item["statistic"]),
                p_value=float(item["p_value"]),
                degenerate=bool(item.get("degenerate", False)),
            )
            for item in data.get("entries", [])
        ]
        return cls(data["model_a"], data["model_b"], data["test"], data["alternative"], entries)


ALTERNATIVES = ("two-sided", "less", "greater")


def _keyed(report: EvalReport, test_set: str) -> pd.Series:
    frame = report.primary()
    frame = frame[frame["test_set"] == test_set]
    return frame.set_index(["subject_id", "variant_id"])["dsc"].sort_index()


def _degenerate(diff_mean: float, n: int, statistic: float, p: float) -> Optional[Tuple[float, float]]:
    if n >= 2 and np.isfinite(statistic) and np.isfinite(p):
        return None
    # Zero spread: p = 1 for identical results, p = 0 for a constant nonzero shift.
    return float("nan"), 1.0 if diff_mean == 0.0 or n < 2 else 0.0


def compare(
    a: EvalReport,
    b: EvalReport,
    *,
    paired: bool = True,
    alternative: str = "two-sided",
    names: Tuple[str, str] = ("a", "b"),
) -> ComparisonReport:
    """t-test on per-instance DSC of ``a`` against ``b`` for every shared test set."""

    if alternative not in ALTERNATIVES:
        raise EvaluationError(f"alternative must be one of {ALTERNATIVES}, got '{alternative}'")
    sets_a = set(a.primary()["test_set"])
    sets_b = set(b.primary()["test_set"])
    if paired and sets_a != sets_b:
        raise AlignmentError(f"Reports cover different test sets: {sorted(sets_a ^ sets_b)}")
    report = ComparisonReport(
        model_a=names[0],
        model_b=names[1],
        test="paired_t" if paired else "welch_t",
        alternative=alternative,
    )
    for test_set in sorted(sets_a & sets_b):
        sa, sb = _keyed(a, test_set), _keyed(b, test_set)
        if paired:
            missing = sorted(set(sa.index) ^ set(sb.index))
            if missing:
                listed = ", ".join(f"{sid}/v{vid:02d}" for sid, vid in missing[:10])
                raise AlignmentError(f"{test_set}: rows present in only one report: {listed}")
            sb = sb.reindex(sa.index)
            va, vb = sa.to_numpy(np.float64), sb.to_numpy(np.float64)
            diff = va - vb
            mean_diff = float(diff.mean()) if diff.size else 0.0
            if diff.size >= 2 and np.ptp(diff) > 0:
                result = stats.ttest_rel(va, vb, alternative=alternative)
                statistic, p = float(result.statistic), float(result.pvalue)
            else:
                statistic, p = float("nan"), float("nan")
            n = int(diff.size)
        else:
            va, vb = sa.to_numpy(np.float64), sb.to_numpy(np.float64)
            mean_diff = float(va.mean() - vb.mean()) if va.size and vb.size else 0.0
            if va.size >= 2 and vb.size >= 2 and (np.ptp(va) > 0 or np.ptp(vb) > 0):
                result = stats.ttest_ind(va, vb, equal_var=False, alternative=alternative)
                statistic, p = float(result.statistic), float(result.pvalue)
            else:
                statistic, p = float("nan"), float("nan")
            n = int(min(va.size, vb.size))
        fallback = _degenerate(mean_diff, n, statistic, p)
        entry = ComparisonEntry(test_set, n, mean_diff, statistic, p)
        if fallback is not None:
            entry.statistic, entry.p_value = fallback
            entry.degenerate = True
        report.entries.append(entry)
    return report


def compare_all(
    reports: Mapping[str, EvalReport],
    pairs: Sequence[Tuple[str, str]] = TABLE_PAIRS,
    **kwargs: Any,
) -> List[ComparisonReport]:
    """Every listed (a, b) comparison whose two reports are available."""

    results = []
    for name_a, name_b in pairs:
        if name_a not in reports or name_b not in reports:
            logger.warning("Skipping %s vs %s: report missing", name_a, name_b)
            continue
        results.append(compare(reports[name_a], reports[name_b], names=(name_a, name_b), **kwargs))
    return results


def write_report(report: EvalReport, directory: Path, stem: str) -> Tuple[Path, Path]:
    """Write ``<stem>.csv`` (rows) and ``<stem>.json`` (aggregates)."""

    directory = Path(directory)
    csv_path = directory / f"{stem}.csv"
    with atomic_output(csv_path) as tmp:
        report.rows.to_csv(tmp, index=False, float_format="%.17g")
    json_path = write_json(report.aggregates(), directory / f"{stem}.json")
    return csv_path, json_path


def read_report(path: Path) -> EvalReport:
    """Load a report from its CSV rows (``.csv``) with the sibling JSON, if present."""

    path = Path(path)
    csv_path = path.with_suffix(".csv")
    if not csv_path.exists():
        raise MissingFileError(csv_path)
    rows = pd.read_csv(csv_path, dtype={"subject_id": str, "class_name": str, "test_set": str, "scope": str})
    json_path = path.with_suffix(".json")
    meta: Dict[str, Any] = {}
    if json_path.exists():
        meta = json.loads(json_path.read_text(encoding="utf-8"))
    return EvalReport(
        rows=rows[ROW_COLUMNS],
        metadata=meta.get("metadata", {}),
        errors=meta.get("errors", {}),
        notes=meta.get("notes", []),
    )


def write_comparisons(comparisons: Sequence[ComparisonReport], path: Path) -> Path:
    return write_json({"comparisons": [c.to_dict() for c in comparisons]}, path)


def read_comparisons(path: Path) -> List[ComparisonReport]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    return [ComparisonReport.from_dict(item) for item in raw.get("comparisons", [])]


__all__ = [
    "ComparisonEntry",
    "ComparisonReport",
    "EvalReport",
    "METHOD_ORDER",
    "PUBLISHED_REFERENCE",
    "SINGLE_ANATOMY_SET",
    "ALTERNATIVES",
    "TABLE_PAIRS",
    "TEST_SETS",
    "assign_test_set",
    "compare",
    "compare_all",
    "complete_pair",
    "evaluate",
    "evaluate_single_anatomy",
    "mask_dsc",
    "read_comparisons",
    "read_report",
    "render_slices",
    "write_comparisons",
    "write_report",
]
