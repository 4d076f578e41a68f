from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from anatomy_completion.corpus import RemovalPolicy, build_corpus  # noqa: E402
from anatomy_completion.network import DaeConfig  # noqa: E402
from anatomy_completion.phantom import default_phantom_spec, generate_phantoms  # noqa: E402
from anatomy_completion.voxel import FractionReference, LabelVolume  # noqa: E402

GRID = (16, 16, 16)


@pytest.fixture
def small_labels() -> LabelVolume:
    """4x4x4 grid: class 1 fills three voxels, class 2 one voxel, class 3 two voxels."""

    data = np.zeros((4, 4, 4), dtype=np.uint8)
    data[0, 0, 0:3] = 1
    data[1, 1, 1] = 2
    data[3, 3, 2:4] = 3
    return LabelVolume(data=data, spacing=(1.0, 2.0, 3.0), class_table={1: "liver", 2: "spleen", 3: "spine"})


@pytest.fixture(scope="session")
def phantom_spec():
    return default_phantom_spec(GRID)


@pytest.fixture(scope="session")
def phantoms(phantom_spec):
    return generate_phantoms(phantom_spec, 6, seed=3)


@pytest.fixture
def phantom_policy() -> RemovalPolicy:
    return RemovalPolicy(
        thresholds=(0.1, 0.2, 0.4),
        reference=FractionReference.LARGEST_CLASS,
        protected_names=("rib_cage", "spine"),
        seed=11,
    )


@pytest.fixture
def phantom_corpus(phantoms, phantom_policy):
    return build_corpus(phantoms, phantom_policy, 0.5)


@pytest.fixture
def tiny_dae() -> DaeConfig:
    return DaeConfig(input_shape=GRID, down_stages=2, channel_widths=(4, 8), head_width=4)
