"""Assemble evaluation results into Markdown tables."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .evalkit import METHOD_ORDER, PUBLISHED_REFERENCE, TEST_SETS, ComparisonReport, EvalReport
from .utils import atomic_output

DISPLAY_NAMES = {
    "dae_b": "DAE_b",
    "dae_agg": "DAE_agg",
    "dae_res": "DAE_res",
    "dae_agg_res": "DAE_agg+res",
    "multiclass_agg": "DAE_agg (multi-class)",
}

DEFAULT_SETS: Tuple[str, ...] = tuple(TEST_SETS.values())


def display_name(name: str) -> str:
    return DISPLAY_NAMES.get(name, name)


def format_mean_sd(mean: float, sd: float) -> str:
    if math.isnan(mean):
        return "n/a"
    if math.isnan(sd):
        return f"{mean:.3f}"
    return f"{mean:.3f} ({sd:.3f})"


def format_p(p: float, degenerate: bool = False) -> str:
    if degenerate:
        return f"{p:.3f} (degenerate)"
    return f"{p:.3f}" if p >= 1e-3 else f"{p:.3e}"


def _ordered(names: Iterable[str]) -> List[str]:
    names = list(names)
    known = [n for n in METHOD_ORDER if n in names]
    return known + sorted(n for n in names if n not in METHOD_ORDER)


def _table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def dsc_table(reports: Mapping[str, EvalReport], test_sets: Sequence[str] = DEFAULT_SETS) -> str:
    """Mean (SD) DSC per method and test set; the best mean per column is bold."""

    means = {name: reports[name].test_set_means() for name in reports}
    best: Dict[str, float] = {}
    for ts in test_sets:
        values = [means[n][ts][0] for n in means if ts in means[n]]
        if values:
            best[ts] = max(values)
    rows = []
    for name in _ordered(reports):
        cells = [display_name(name)]
        for ts in test_sets:
            if ts not in means[name]:
                cells.append("n/a")
                continue
            mean, sd = means[name][ts]
            text = format_mean_sd(mean, sd)
            if mean == best.get(ts) and len(reports) > 1:
                text = text.replace(f"{mean:.3f}", f"**{mean:.3f}**", 1)
            cells.append(text)
        rows.append(cells)
    return _table(["Methods", *test_sets], rows)


def pvalue_table(comparisons: Sequence[ComparisonReport], test_sets: Sequence[str] = DEFAULT_SETS) -> str:
    rows = []
    for comp in comparisons:
        by_set = {e.test_set: e for e in comp.entries}
        cells = [f"{display_name(comp.model_a)} <-> {display_name(comp.model_b)}"]
        for ts in test_sets:
            entry = by_set.get(ts)
            cells.append(format_p(entry.p_value, entry.degenerate) if entry else "n/a")
        rows.append(cells)
    return _table(["Methods", *test_sets], rows)


def missing_ratio_table(reports: Mapping[str, EvalReport], test_sets: Sequence[str] = DEFAULT_SETS) -> str:
    """Mean combined ratio of removed anatomies per test set (identical across methods)."""

    name = _ordered(reports)[0]
    frame = reports[name].primary()
    cells = []
    for ts in test_sets:
        values = frame[frame["test_set"] == ts]["removed_fraction"]
        cells.append(f"{values.mean():.3f}" if len(values) else "n/a")
    return _table(["", *test_sets], [["missing ratio", *cells]])


def class_table(report: EvalReport) -> str:
    """Per-class rows of a multi-class or single-anatomy report."""

    summary = report.summary()
    summary = summary[summary["scope"] != "volume"] if (summary["scope"] == "class").any() else summary
    rows = []
    for item in summary.itertuples(index=False):
        region = "" if math.isnan(item.region_mean) else f"{item.region_mean:.3f}"
        rows.append([str(item.test_set), str(item.class_name), format_mean_sd(item.mean, item.sd), region, str(item.n)])
    return _table(["Test set", "Anatomy", "DSC", "Region DSC", "n"], rows)


def reference_tables(test_sets: Sequence[str] = DEFAULT_SETS) -> str:
    dsc_rows = [
        [display_name(name), *(format_mean_sd(*values[ts]) for ts in test_sets)]
        for name, values in PUBLISHED_REFERENCE["dsc"].items()
    ]
    p_rows = [
        [f"{display_name(a)} <-> {display_name(b)}", *(format_p(values[ts]) for ts in test_sets)]
        for (a, b), values in PUBLISHED_REFERENCE["p_values"].items()
    ]
    return _table(["Methods", *test_sets], dsc_rows) + "\n" + _table(["Methods", *test_sets], p_rows)


def build_report_md(
    reports: Mapping[str, EvalReport],
    comparisons: Sequence[ComparisonReport] = (),
    *,
    title: str = "Anatomy completion results",
    include_reference: bool = True,
) -> str:
    parts = [f"# {title}\n"]
    if reports:
        parts.append("## Mean (SD) of DSC\n")
        parts.append(dsc_table(reports))
        parts.append("\n## Combined missing ratio\n")
        parts.append(missing_ratio_table(reports))
    if comparisons:
        test = comparisons[0].test.replace("_", " ")
        parts.append(f"\n## p values ({test}, {comparisons[0].alternative})\n")
        parts.append(pvalue_table(comparisons))
    if include_reference:
        parts.append("\n## Published reference (whole-body CT, 128^3)\n")
        parts.append(reference_tables())
    return "\n".join(parts)


def write_report_md(content: str, out_path: Path) -> Path:
    with atomic_output(out_path) as tmp:
        tmp.write_text(content, encoding="utf-8")
    return Path(out_path)


def build_report(
    reports: Mapping[str, EvalReport],
    comparisons: Sequence[ComparisonReport],
    out_path: Path,
    *,
    title: Optional[str] = None,
) -> Path:
    content = build_report_md(reports, comparisons, title=title or "Anatomy completion results")
    return write_report_md(content, out_path)


__all__ = [
    "build_report",
    "build_report_md",
    "class_table",
    "dsc_table",
    "format_mean_sd",
    "format_p",
    "missing_ratio_table",
    "pvalue_table",
    "reference_tables",
    "write_report_md",
]
