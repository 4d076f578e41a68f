from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from anatomy_completion.corpus import (
    TEST,
    TRAIN,
    RemovalMode,
    RemovalPolicy,
    build_corpus,
    load_manifest,
    protected_ids,
    remove_anatomies,
    removal_candidates,
    select_classes,
    subject_rng,
    write_corpus,
)
from anatomy_completion.errors import (
    ChecksumError,
    DataError,
    InvalidPolicyError,
    MissingFileError,
    NoCandidateError,
    OutOfRangeError,
)
from anatomy_completion.voxel import FractionReference, LabelVolume, volume_fraction


def test_pairs_are_subsets_and_residual_is_the_removed_union(phantom_corpus):
    assert phantom_corpus.records()
    for rec in phantom_corpus.pairs:
        pair = phantom_corpus.pair(rec)
        x, y = pair.incomplete.data, pair.complete.data
        assert np.all((x != 0) <= (y != 0))
        assert np.array_equal(x[x != 0], y[x != 0])
        removed = np.isin(y, rec.removed_classes)
        assert np.array_equal(pair.residual_mask(), removed)
        assert rec.removed_classes
        assert not set(rec.removed_classes) & phantom_corpus.policy.protected_classes


def test_removed_classes_reach_their_threshold(phantom_corpus):
    policy = phantom_corpus.policy
    for rec in phantom_corpus.pairs:
        native = phantom_corpus.pair(rec).native
        for cid in rec.removed_classes:
            assert volume_fraction(native, cid, policy.reference) >= rec.threshold


def test_variants_follow_thresholds(phantom_corpus):
    for recs in phantom_corpus.groups().values():
        assert [r.variant_id for r in recs] == [1, 2, 3]
        assert [r.threshold for r in recs] == [0.1, 0.2, 0.4]


def test_candidates_shrink_as_the_threshold_grows(phantoms, phantom_policy):
    policy = phantom_policy.resolved(next(iter(phantoms.values())).class_table)
    for vol in phantoms.values():
        sets = [set(removal_candidates(vol, policy, t)) for t in (0.1, 0.2, 0.4)]
        assert sets[0] >= sets[1] >= sets[2]


def test_split_covers_subjects_once(phantom_corpus):
    train, test = phantom_corpus.subjects(TRAIN), phantom_corpus.subjects(TEST)
    assert len(train) == 3 and len(test) == 3
    assert not set(train) & set(test)
    keys = [rec.key for rec in phantom_corpus.pairs]
    assert len(keys) == len(set(keys))


def test_same_seed_gives_identical_manifest_bytes(tmp_path, phantoms, phantom_policy):
    first = write_corpus(build_corpus(phantoms, phantom_policy, 0.5), tmp_path / "a")
    second = write_corpus(build_corpus(phantoms, phantom_policy, 0.5), tmp_path / "b")
    assert first.read_bytes() == second.read_bytes()
    other = build_corpus(phantoms, replace(phantom_policy, seed=12), 0.5)
    assert other.checksum() != load_manifest(first).checksum()


def test_subject_streams_do_not_depend_on_order():
    a = subject_rng(4, "phantom_0002").integers(0, 1 << 30, size=4)
    b = subject_rng(4, "phantom_0002").integers(0, 1 << 30, size=4)
    c = subject_rng(4, "phantom_0003").integers(0, 1 << 30, size=4)
    assert a.tolist() == b.tolist()
    assert a.tolist() != c.tolist()


def test_written_corpus_reloads_with_checksums(tmp_path, phantom_corpus):
    path = write_corpus(phantom_corpus, tmp_path / "corpus")
    manifest = load_manifest(tmp_path / "corpus")
    assert manifest.checksum() == phantom_corpus.checksum()
    rec = manifest.pairs[0]
    pair = manifest.pair(rec)
    assert pair.original_shape == (16, 16, 16)
    assert np.array_equal(pair.incomplete.data, phantom_corpus.pair(rec).incomplete.data)

    raw = path.parent / rec.files["complete"].replace(".json", ".raw")
    payload = bytearray(raw.read_bytes())
    payload[-1] ^= 1
    raw.write_bytes(bytes(payload))
    with pytest.raises(ChecksumError):
        load_manifest(path)
    raw.unlink()
    with pytest.raises(MissingFileError):
        load_manifest(path)


def test_manifest_schema_version_is_checked(tmp_path, phantom_corpus):
    path = write_corpus(phantom_corpus, tmp_path / "corpus")
    doc = json.loads(path.read_text())
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_manifest(path)


def test_resampled_corpus_keeps_native_shape(phantoms, phantom_policy):
    manifest = build_corpus(phantoms, phantom_policy, 0.5, target_shape=(8, 8, 8))
    pair = manifest.pair(manifest.pairs[0])
    assert pair.incomplete.shape == pair.complete.shape == (8, 8, 8)
    assert pair.original_shape == pair.native.shape == (16, 16, 16)
    assert manifest.target_shape == (8, 8, 8)


def _labels() -> LabelVolume:
    data = np.zeros((4, 4, 4), dtype=np.uint8)
    data[0] = 1  # 16 voxels
    data[1, :2] = 2  # 8 voxels
    data[2, 0, :2] = 3  # 2 voxels
    data[3, 0, 0] = 4  # 1 voxel
    return LabelVolume(data=data, spacing=(1, 1, 1), class_table={1: "spine", 2: "liver", 3: "spleen", 4: "aorta"})


def test_threshold_candidates_without_candidates():
    policy = RemovalPolicy(thresholds=(0.5,), protected_classes=frozenset({1}))
    with pytest.raises(NoCandidateError):
        remove_anatomies(_labels(), policy, np.random.default_rng(0), threshold=0.5)


def test_everything_protected_is_an_invalid_policy():
    policy = RemovalPolicy(protected_classes=frozenset({1, 2, 3, 4}))
    with pytest.raises(InvalidPolicyError):
        remove_anatomies(_labels(), policy, np.random.default_rng(0))


def test_cumulative_target_reaches_the_threshold():
    policy = RemovalPolicy(thresholds=(0.3,), mode=RemovalMode.CUMULATIVE_TARGET, protected_classes=frozenset({1}))
    for seed in range(5):
        out, removed, fraction = remove_anatomies(_labels(), policy, np.random.default_rng(seed), threshold=0.3)
        assert fraction >= 0.3
        assert 1 not in removed
        assert out.present_classes() == tuple(c for c in (1, 2, 3, 4) if c not in removed)
    with pytest.raises(NoCandidateError):
        remove_anatomies(_labels(), policy, np.random.default_rng(0), threshold=0.9)


def test_single_anatomy_and_skeleton_only_modes():
    protected = frozenset({1})
    single = RemovalPolicy(mode=RemovalMode.SINGLE_ANATOMY, protected_classes=protected, instances_per_subject=4)
    _, removed, _ = remove_anatomies(_labels(), single, np.random.default_rng(2))
    assert len(removed) == 1 and removed[0] in (2, 3, 4)
    assert single.variant_thresholds() == [None] * 4

    skeleton = RemovalPolicy(mode=RemovalMode.SKELETON_ONLY, protected_classes=protected)
    out, removed, fraction = remove_anatomies(_labels(), skeleton, np.random.default_rng(2))
    assert removed == (2, 3, 4)
    assert out.present_classes() == (1,)
    assert fraction == pytest.approx(11 / 27)


def test_fraction_reference_changes_candidates():
    policy = RemovalPolicy(protected_classes=frozenset({1}), reference=FractionReference.LARGEST_CLASS)
    assert removal_candidates(_labels(), policy, 0.4) == [2]
    policy = RemovalPolicy(protected_classes=frozenset({1}))
    assert removal_candidates(_labels(), policy, 0.4) == []


def test_protected_names_resolve_to_ids():
    table = {1: "spine", 2: "liver", 3: "rib_left_1", 4: "rib_right_1"}
    assert protected_ids(table, ["spine", "rib_*"]) == frozenset({1, 3, 4})
    with pytest.raises(InvalidPolicyError):
        protected_ids(table, ["skull"])


def test_policy_validation():
    with pytest.raises(InvalidPolicyError):
        RemovalPolicy(thresholds=(0.0,)).validate()
    with pytest.raises(InvalidPolicyError):
        RemovalPolicy(instances_per_subject=0).validate()
    with pytest.raises(InvalidPolicyError):
        RemovalPolicy(protected_classes=frozenset({9})).validate({1: "liver"})


def test_corpus_needs_two_subjects(phantoms, phantom_policy):
    one = dict(list(phantoms.items())[:1])
    with pytest.raises(DataError):
        build_corpus(one, phantom_policy, 0.5)


def test_subjects_without_candidates_are_skipped(phantoms, phantom_policy):
    subjects = dict(phantoms)
    skeleton = next(iter(phantoms.values()))
    subjects["bones_only"] = skeleton.only_classes(skeleton.class_ids(["rib_cage", "spine"]))
    manifest = build_corpus(subjects, phantom_policy, 0.5)
    assert "bones_only" in manifest.skipped
    assert "bones_only" not in manifest.split


def test_select_classes_relabels_densely(small_labels):
    out = select_classes(small_labels, ["spine", "liver"])
    assert out.class_table == {1: "spine", 2: "liver"}
    assert out.counts() == {1: 2, 2: 3}
    with pytest.raises(OutOfRangeError):
        select_classes(small_labels, ["heart"])


def test_only_the_dominant_class_clears_a_high_threshold():
    data = np.zeros((1, 1, 10), dtype=np.uint8)
    data[0, 0, :5] = 1
    data[0, 0, 5:8] = 2
    data[0, 0, 8:] = 3
    vol = LabelVolume(data=data, spacing=(1, 1, 1), class_table={1: "liver", 2: "spleen", 3: "aorta"})
    policy = RemovalPolicy(thresholds=(0.4,))
    out, removed, fraction = remove_anatomies(vol, policy, np.random.default_rng(0), threshold=0.4)
    assert removed == (1,)
    assert fraction == pytest.approx(0.5)
    assert out.present_classes() == (2, 3)
    again = remove_anatomies(vol, policy, np.random.default_rng(0), threshold=0.4)
    assert again[1] == removed


def test_split_arithmetic_on_ten_phantoms(phantom_spec, phantom_policy):
    from anatomy_completion.phantom import generate_phantoms

    manifest = build_corpus(generate_phantoms(phantom_spec, 10, seed=3), phantom_policy, 0.6)
    assert not manifest.skipped
    assert len(manifest.subjects(TRAIN)) == 6
    assert len(manifest.subjects(TEST)) == 4
    assert len(manifest.records(TRAIN)) == 18
    assert len(manifest.records(TEST)) == 12


def test_rewriting_a_corpus_drops_stale_subjects(tmp_path, phantoms, phantom_policy):
    out = tmp_path / "corpus"
    write_corpus(build_corpus(phantoms, phantom_policy, 0.5), out)
    assert len([p for p in out.iterdir() if p.is_dir()]) == 6

    two = dict(list(phantoms.items())[:2])
    path = write_corpus(build_corpus(two, phantom_policy, 0.5), out)
    manifest = load_manifest(path)
    on_disk = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert on_disk == sorted({rec.subject_id for rec in manifest.pairs}) == manifest.subjects()
    assert len(on_disk) == 2 and not manifest.skipped
    assert manifest.root == out
    assert sorted(p.name for p in tmp_path.iterdir()) == ["corpus"]


def test_failed_write_keeps_the_previous_corpus(tmp_path, phantoms, phantom_policy, monkeypatch):
    import anatomy_completion.corpus as corpus_module

    out = tmp_path / "corpus"
    path = write_corpus(build_corpus(phantoms, phantom_policy, 0.5), out)
    before = path.read_bytes()

    def broken(manifest, path):
        raise OSError("disk full")

    monkeypatch.setattr(corpus_module, "write_manifest", broken)
    with pytest.raises(OSError):
        write_corpus(build_corpus(phantoms, replace(phantom_policy, seed=12), 0.5), out)
    assert path.read_bytes() == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["corpus"]


def test_loaded_pairs_are_read_once(tmp_path, phantom_corpus):
    manifest = load_manifest(write_corpus(phantom_corpus, tmp_path / "corpus"))
    rec = manifest.pairs[0]
    first = manifest.pair(rec)
    (tmp_path / "corpus" / rec.files["incomplete"].replace(".json", ".raw")).unlink()
    assert manifest.pair(rec) is first


def test_skeleton_only_needs_something_to_keep():
    with pytest.raises(InvalidPolicyError):
        RemovalPolicy(mode=RemovalMode.SKELETON_ONLY).validate()
    named = RemovalPolicy(mode=RemovalMode.SKELETON_ONLY, protected_names=("spine",))
    named.validate()
    with pytest.raises(InvalidPolicyError):
        remove_anatomies(_labels(), named, np.random.default_rng(0))
    out, removed, _ = remove_anatomies(_labels(), named.resolved(_labels().class_table), np.random.default_rng(0))
    assert out.present_classes() == (1,)
