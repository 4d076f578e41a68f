"""PNG montages of completions, colouring each voxel by its outcome."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from .errors import PlaneError, ShapeError  # noqa: E402
from .utils import atomic_output  # noqa: E402
from .voxel import BinaryVolume  # noqa: E402

logger = logging.getLogger(__name__)

PLANE_AXES = {"sagittal": 0, "coronal": 1, "axial": 2}

# Category codes index into CATEGORY_COLORS; 0 is background.
CATEGORIES = ("input_overlap", "reconstructed_missing", "false_negative", "false_positive")
CATEGORY_COLORS = {
    "background": (0.0, 0.0, 0.0),
    "input_overlap": (0.6, 0.6, 0.6),
    "reconstructed_missing": (0.85, 0.1, 0.1),
    "false_negative": (1.0, 1.0, 1.0),
    "false_positive": (0.15, 0.35, 0.95),
}


@dataclass
class RenderResult:
    path: Path
    plane: str
    slices: List[int]
    counts: Dict[str, int]
    slice_counts: List[Dict[str, int]] = field(default_factory=list)


def categorize(incomplete: np.ndarray, target: np.ndarray, completion: np.ndarray) -> np.ndarray:
    """Per-voxel code: 1 overlap with input, 2 reconstructed missing, 3 false negative, 4 false positive."""

    x = incomplete.astype(bool)
    y = target.astype(bool)
    c = completion.astype(bool)
    codes = np.zeros(x.shape, dtype=np.uint8)
    codes[c & x] = 1
    codes[c & y & ~x] = 2
    codes[y & ~c] = 3
    codes[c & ~y] = 4
    return codes


def category_counts(codes: np.ndarray) -> Dict[str, int]:
    return {name: int(np.count_nonzero(codes == idx)) for idx, name in enumerate(CATEGORIES, start=1)}


def plane_axis(plane: str) -> int:
    try:
        return PLANE_AXES[plane]
    except KeyError as exc:
        raise PlaneError(f"Unknown plane '{plane}'; expected one of {', '.join(PLANE_AXES)}") from exc


def default_slices(codes: np.ndarray, axis: int, count: int) -> List[int]:
    """``count`` evenly spaced slices through the occupied extent along ``axis``."""

    occupied = np.flatnonzero(np.moveaxis(codes, axis, 0).reshape(codes.shape[axis], -1).any(axis=1))
    if occupied.size == 0:
        return [codes.shape[axis] // 2]
    lo, hi = int(occupied[0]), int(occupied[-1])
    picks = np.linspace(lo, hi, num=max(1, count) + 2)[1:-1]
    return sorted({int(round(p)) for p in picks})


def render_montage(
    incomplete: BinaryVolume,
    target: BinaryVolume,
    completion: BinaryVolume,
    plane: str,
    path: Path,
    *,
    slices: Optional[Sequence[int]] = None,
    count: int = 4,
    title: str = "",
) -> RenderResult:
    """Write a montage of ``plane`` slices and return per-category pixel counts."""

    axis = plane_axis(plane)
    if not incomplete.shape == target.shape == completion.shape:
        raise ShapeError(
            f"Render inputs differ in shape: {incomplete.shape}, {target.shape}, {completion.shape}"
        )
    codes = categorize(incomplete.data, target.data, completion.data)
    picked = list(slices) if slices is not None else default_slices(codes, axis, count)
    for idx in picked:
        if not 0 <= idx < codes.shape[axis]:
            raise PlaneError(f"Slice {idx} is outside the {plane} extent 0..{codes.shape[axis] - 1}")

    cmap = ListedColormap([CATEGORY_COLORS["background"], *(CATEGORY_COLORS[c] for c in CATEGORIES)])
    fig, axes = plt.subplots(1, len(picked), figsize=(3 * len(picked), 3.4), squeeze=False)
    slice_counts: List[Dict[str, int]] = []
    for ax, idx in zip(axes[0], picked):
        panel = np.take(codes, idx, axis=axis)
        slice_counts.append(category_counts(panel))
        ax.imshow(panel.T, cmap=cmap, vmin=0, vmax=len(CATEGORIES), origin="lower", interpolation="nearest")
        ax.set_title(f"{plane} {idx}", fontsize=8, color="white")
        ax.set_axis_off()
    totals = {name: sum(sc[name] for sc in slice_counts) for name in CATEGORIES}
    handles = [
        Patch(facecolor=CATEGORY_COLORS[name], edgecolor="0.3", label=f"{name.replace('_', ' ')} ({totals[name]})")
        for name in CATEGORIES
    ]
    fig.legend(handles=handles, loc="lower center", ncol=len(CATEGORIES), fontsize=7, frameon=False, labelcolor="white")
    if title:
        fig.suptitle(title, fontsize=9, color="white")
    fig.subplots_adjust(bottom=0.15)

    path = Path(path)
    with atomic_output(path) as tmp:
        fig.savefig(tmp, format="png", dpi=100, facecolor="black", metadata={"Software": None})
    plt.close(fig)
    logger.debug("Rendered %s slices %s to %s", plane, picked, path)
    return RenderResult(path=path, plane=plane, slices=picked, counts=totals, slice_counts=slice_counts)


__all__ = [
    "CATEGORIES",
    "CATEGORY_COLORS",
    "PLANE_AXES",
    "RenderResult",
    "categorize",
    "category_counts",
    "render_montage",
]
