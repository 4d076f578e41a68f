from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from anatomy_completion.errors import ConfigError, InvalidSpecError, MissingFileError
from anatomy_completion.phantom import (
    PhantomSpec,
    achieved_fractions,
    default_phantom_spec,
    generate_phantom,
    generate_phantoms,
    load_phantom_spec,
    validate_spec,
)


def test_phantoms_are_reproducible(phantom_spec):
    a = generate_phantoms(phantom_spec, 2, seed=9)
    b = generate_phantoms(phantom_spec, 2, seed=9)
    c = generate_phantoms(phantom_spec, 2, seed=10)
    assert list(a) == ["phantom_0001", "phantom_0002"]
    for key in a:
        assert np.array_equal(a[key].data, b[key].data)
    assert not np.array_equal(a["phantom_0001"].data, c["phantom_0001"].data)
    assert not np.array_equal(a["phantom_0001"].data, a["phantom_0002"].data)


def test_achieved_fractions_match_targets(phantom_spec):
    vol = generate_phantom(phantom_spec, np.random.default_rng(1))
    size = float(np.prod(phantom_spec.grid_shape))
    fractions = achieved_fractions(vol)
    assert set(fractions) == {p.name for p in phantom_spec.primitives}
    for prim in phantom_spec.primitives:
        lo, hi = prim.fraction
        assert lo - 1 / size <= fractions[prim.name] <= hi + 1 / size


def test_every_class_is_present(phantoms):
    for vol in phantoms.values():
        assert vol.present_classes() == tuple(range(1, 13))


def test_protected_names_follow_the_spec(phantom_spec):
    assert phantom_spec.protected_names == ["rib_cage", "spine"]


@pytest.mark.parametrize(
    "change",
    [
        lambda s: replace(s, primitives=s.primitives[:2]),
        lambda s: replace(s, grid_shape=(3, 16, 16)),
        lambda s: replace(s, primitives=[replace(p, protected=False) for p in s.primitives]),
        lambda s: replace(s, primitives=[replace(s.primitives[0], kind="torus"), *s.primitives[1:]]),
        lambda s: replace(s, primitives=[replace(p, fraction=(0.1, 0.2)) for p in s.primitives]),
    ],
)
def test_invalid_specs_are_rejected(phantom_spec, change):
    with pytest.raises(InvalidSpecError):
        validate_spec(change(phantom_spec))


def test_spec_file_round_trip(tmp_path):
    spec = default_phantom_spec((24, 24, 24))
    path = tmp_path / "phantom.json"
    path.write_text(json.dumps(spec.to_dict()))
    loaded = load_phantom_spec(path)
    assert loaded.grid_shape == (24, 24, 24)
    assert [p.name for p in loaded.primitives] == [p.name for p in spec.primitives]
    with pytest.raises(MissingFileError):
        load_phantom_spec(tmp_path / "absent.json")


def test_unknown_spec_keys_are_rejected():
    with pytest.raises(ConfigError, match="grid_shape"):
        PhantomSpec.from_dict({"grid_shap": [8, 8, 8]})
