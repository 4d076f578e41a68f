"""Procedural multi-label phantoms standing in for whole-body segmentations."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidSpecError, MissingFileError
from .utils import check_keys
from .voxel import LabelVolume

logger = logging.getLogger(__name__)

KINDS = ("ellipsoid", "box", "tube", "ribs")
MAX_TOTAL_FRACTION = 0.9


@dataclass
class PrimitiveSpec:
    """One synthetic anatomy: shape kind, placement, and whole-grid fraction range."""

    name: str
    kind: str
    fraction: Tuple[float, float]
    center: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    radii: Tuple[float, float, float] = (0.1, 0.1, 0.1)
    protected: bool = False
    count: int = 6

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PrimitiveSpec":
        check_keys(data, cls.__dataclass_fields__, "phantom primitive")
        fraction = data["fraction"]
        if isinstance(fraction, (int, float)):
            fraction = (float(fraction), float(fraction))
        return cls(
            name=str(data["name"]),
            kind=str(data["kind"]),
            fraction=(float(fraction[0]), float(fraction[1])),
            center=tuple(float(v) for v in data.get("center", (0.5, 0.5, 0.5))),
            radii=tuple(float(v) for v in data.get("radii", (0.1, 0.1, 0.1))),
            protected=bool(data.get("protected", False)),
            count=int(data.get("count", 6)),
        )


@dataclass
class PhantomSpec:
    grid_shape: Tuple[int, int, int] = (48, 48, 48)
    spacing: Tuple[float, float, float] = (1.5, 1.5, 1.5)
    center_jitter: float = 0.03
    size_jitter: float = 0.15
    primitives: List[PrimitiveSpec] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PhantomSpec":
        check_keys(data, ["schema_version", *cls.__dataclass_fields__], "phantom spec")
        return cls(
            grid_shape=tuple(int(v) for v in data.get("grid_shape", (48, 48, 48))),
            spacing=tuple(float(v) for v in data.get("spacing", (1.5, 1.5, 1.5))),
            center_jitter=float(data.get("center_jitter", 0.03)),
            size_jitter=float(data.get("size_jitter", 0.15)),
            primitives=[PrimitiveSpec.from_dict(item) for item in data.get("primitives", [])],
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"schema_version": 1, **asdict(self)}

    def with_shape(self, grid_shape: Sequence[int]) -> "PhantomSpec":
        return PhantomSpec(
            grid_shape=tuple(int(v) for v in grid_shape),
            spacing=self.spacing,
            center_jitter=self.center_jitter,
            size_jitter=self.size_jitter,
            primitives=list(self.primitives),
        )

    @property
    def protected_names(self) -> List[str]:
        return [p.name for p in self.primitives if p.protected]


DEFAULT_PRIMITIVES: List[Dict[str, Any]] = [
    {"name": "rib_cage", "kind": "ribs", "fraction": [0.05, 0.065], "center": [0.5, 0.5, 0.5],
     "radii": [0.42, 0.36, 0.38], "protected": True, "count": 6},
    {"name": "spine", "kind": "tube", "fraction": [0.015, 0.02], "center": [0.5, 0.8, 0.5],
     "radii": [0.05, 0.05, 0.45], "protected": True},
    {"name": "lung_left", "kind": "ellipsoid", "fraction": [0.05, 0.07], "center": [0.32, 0.45, 0.68],
     "radii": [0.13, 0.2, 0.2]},
    {"name": "lung_right", "kind": "ellipsoid", "fraction": [0.05, 0.07], "center": [0.68, 0.45, 0.68],
     "radii": [0.13, 0.2, 0.2]},
    {"name": "heart", "kind": "ellipsoid", "fraction": [0.02, 0.03], "center": [0.55, 0.38, 0.62],
     "radii": [0.1, 0.1, 0.1]},
    {"name": "liver", "kind": "ellipsoid", "fraction": [0.07, 0.09], "center": [0.62, 0.45, 0.35],
     "radii": [0.22, 0.18, 0.14]},
    {"name": "stomach", "kind": "box", "fraction": [0.015, 0.025], "center": [0.36, 0.35, 0.38],
     "radii": [0.08, 0.08, 0.08]},
    {"name": "spleen", "kind": "ellipsoid", "fraction": [0.008, 0.012], "center": [0.25, 0.6, 0.38],
     "radii": [0.05, 0.07, 0.07]},
    {"name": "kidney_left", "kind": "ellipsoid", "fraction": [0.006, 0.01], "center": [0.35, 0.7, 0.28],
     "radii": [0.04, 0.04, 0.08]},
    {"name": "kidney_right", "kind": "ellipsoid", "fraction": [0.006, 0.01], "center": [0.65, 0.7, 0.28],
     "radii": [0.04, 0.04, 0.08]},
    {"name": "aorta", "kind": "tube", "fraction": [0.008, 0.012], "center": [0.45, 0.68, 0.5],
     "radii": [0.03, 0.03, 0.42]},
    {"name": "pancreas", "kind": "box", "fraction": [0.005, 0.008], "center": [0.5, 0.55, 0.3],
     "radii": [0.1, 0.03, 0.03]},
]


def default_phantom_spec(grid_shape: Sequence[int] = (48, 48, 48)) -> PhantomSpec:
    return PhantomSpec.from_dict({"grid_shape": list(grid_shape), "primitives": DEFAULT_PRIMITIVES})


def load_phantom_spec(path: Path) -> PhantomSpec:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    with path.open("r", encoding="utf-8") as fh:
        return PhantomSpec.from_dict(json.load(fh))


def validate_spec(spec: PhantomSpec) -> None:
    if len(spec.primitives) < 3:
        raise InvalidSpecError(f"A phantom needs at least 3 primitives, got {len(spec.primitives)}")
    if len(spec.grid_shape) != 3 or any(s < 4 for s in spec.grid_shape):
        raise InvalidSpecError(f"Grid shape must be 3D with sides >= 4, got {spec.grid_shape}")
    names = [p.name for p in spec.primitives]
    if len(set(names)) != len(names):
        raise InvalidSpecError(f"Primitive names must be unique, got {names}")
    if not any(p.protected for p in spec.primitives):
        raise InvalidSpecError("A phantom needs a protected skeleton primitive")
    for p in spec.primitives:
        if p.kind not in KINDS:
            raise InvalidSpecError(f"Unknown primitive kind '{p.kind}' for {p.name}; expected one of {KINDS}")
        lo, hi = p.fraction
        if not 0 < lo <= hi < 1:
            raise InvalidSpecError(f"Fraction range for {p.name} must satisfy 0 < lo <= hi < 1, got {p.fraction}")
    total = sum(p.fraction[1] for p in spec.primitives)
    if total > MAX_TOTAL_FRACTION:
        raise InvalidSpecError(f"Fractions sum to {total:.3f}, above the placeable {MAX_TOTAL_FRACTION}")


def _grid_coords(shape: Sequence[int]) -> Tuple[np.ndarray, ...]:
    axes = [(np.arange(n, dtype=np.float64) + 0.5) / n for n in shape]
    return tuple(np.meshgrid(*axes, indexing="ij"))


def _potential(kind: str, coords: Tuple[np.ndarray, ...], center: np.ndarray, radii: np.ndarray, count: int) -> np.ndarray:
    u = [(coords[i] - center[i]) / radii[i] for i in range(3)]
    if kind == "ellipsoid":
        return u[0] ** 2 + u[1] ** 2 + u[2] ** 2
    if kind == "box":
        return np.maximum(np.maximum(np.abs(u[0]), np.abs(u[1])), np.abs(u[2]))
    if kind == "tube":
        return np.maximum(u[0] ** 2 + u[1] ** 2, u[2] ** 2)
    # ribs: thin elliptical rings stacked along H
    rho = np.sqrt(u[0] ** 2 + u[1] ** 2)
    scale = min(radii[0], radii[1])
    levels = np.linspace(center[2] - radii[2], center[2] + radii[2], max(int(count), 1))
    radial = ((rho - 1.0) * scale) ** 2
    return np.min(np.stack([radial + (coords[2] - z) ** 2 for z in levels]), axis=0)


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator) -> LabelVolume:
    """Place non-overlapping labelled primitives with jittered poses.

    Each primitive claims exactly ``round(f * N)`` free voxels with the lowest
    shape potential, where ``f`` is drawn from its fraction range and ``N`` is
    the grid size, so achieved whole-grid fractions match their targets.
    """

    validate_spec(spec)
    shape = tuple(int(s) for s in spec.grid_shape)
    total = int(np.prod(shape))
    coords = _grid_coords(shape)
    labels = np.zeros(shape, dtype=np.uint8)

    draws = []
    for class_id, prim in enumerate(spec.primitives, start=1):
        center = np.asarray(prim.center, dtype=np.float64) + rng.uniform(-spec.center_jitter, spec.center_jitter, 3)
        scale = rng.uniform(1.0 - spec.size_jitter, 1.0 + spec.size_jitter, 3)
        radii = np.asarray(prim.radii, dtype=np.float64) * scale
        target = max(1, int(round(rng.uniform(*prim.fraction) * total)))
        draws.append((class_id, prim, center, radii, target))

    # Skeleton first, then larger organs before smaller ones.
    ordered = sorted(draws, key=lambda d: (not d[1].protected, -d[4], d[0]))
    flat = labels.reshape(-1)
    for class_id, prim, center, radii, target in ordered:
        free = np.flatnonzero(flat == 0)
        potential = _potential(prim.kind, coords, center, radii, prim.count).reshape(-1)[free]
        chosen = free[np.argsort(potential, kind="stable")[:target]]
        flat[chosen] = class_id

    table = {class_id: prim.name for class_id, prim in enumerate(spec.primitives, start=1)}
    vol = LabelVolume(data=labels, spacing=spec.spacing, class_table=table)
    logger.debug("Phantom fractions: %s", achieved_fractions(vol))
    return vol


def achieved_fractions(vol: LabelVolume) -> Dict[str, float]:
    """Whole-grid fraction per anatomy name."""

    counts = vol.counts()
    size = float(vol.data.size)
    return {vol.class_table[cid]: counts.get(cid, 0) / size for cid in sorted(vol.class_table)}


def generate_phantoms(spec: PhantomSpec, count: int, seed: int) -> Dict[str, LabelVolume]:
    """``count`` phantoms keyed ``phantom_0001``...; phantom i uses seed stream (seed, i)."""

    phantoms: Dict[str, LabelVolume] = {}
    for idx in range(1, count + 1):
        rng = np.random.default_rng([int(seed), idx])
        phantoms[f"phantom_{idx:04d}"] = generate_phantom(spec, rng)
    return phantoms


__all__ = [
    "DEFAULT_PRIMITIVES",
    "PhantomSpec",
    "PrimitiveSpec",
    "achieved_fractions",
    "default_phantom_spec",
    "generate_phantom",
    "generate_phantoms",
    "load_phantom_spec",
    "validate_spec",
]
