from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from anatomy_completion import trainer
from anatomy_completion.checkpoint import load_checkpoint
from anatomy_completion.config import apply_overrides, load_experiment
from anatomy_completion.corpus import TEST, TRAIN, RemovalPolicy, build_corpus
from anatomy_completion.errors import ManifestMismatchError, NonFiniteLossError
from anatomy_completion.network import forward
from anatomy_completion.paths import checkpoint_path, record_path
from anatomy_completion.phantom import default_phantom_spec, generate_phantoms
from anatomy_completion.trainer import (
    PairDataset,
    TrainingRecord,
    check_manifest,
    completion_dsc,
    epoch_batches,
    run_ablation_suite,
    train,
)
from anatomy_completion.voxel import FractionReference

CPU = torch.device("cpu")


def _tiny(**extra):
    overrides = {
        "dae.input_shape": [16, 16, 16],
        "dae.down_stages": 2,
        "dae.channel_widths": [4, 8],
        "dae.head_width": 4,
        "epochs": 2,
        "batch_size": 2,
        "monitor_every": 1,
        "seed": 5,
    }
    overrides.update(extra)
    return apply_overrides(load_experiment(preset="phantom_agg_res"), overrides)


def test_aggregated_batches_hold_whole_subjects(phantom_corpus):
    config = _tiny()
    dataset = PairDataset(phantom_corpus, phantom_corpus.records(TRAIN), config.dae)
    batches = epoch_batches(dataset, aggregated=True, batch_size=2, seed=5, epoch=1)
    assert [len(b) for b in batches] == [6, 3]
    assert sorted(i for b in batches for i in b) == list(range(9))
    for batch in batches:
        subjects = [dataset.records[i].subject_id for i in batch]
        for sid in set(subjects):
            assert subjects.count(sid) == 3
    x, y = dataset[batches[0][0]]
    assert x.shape == y.shape == (1, 16, 16, 16)
    assert torch.all(x <= y)


def test_plain_batches_are_seeded_per_epoch(phantom_corpus):
    dataset = PairDataset(phantom_corpus, phantom_corpus.records(TRAIN), _tiny().dae)
    first = epoch_batches(dataset, aggregated=False, batch_size=4, seed=5, epoch=1)
    assert [len(b) for b in first] == [4, 4, 1]
    assert first == epoch_batches(dataset, aggregated=False, batch_size=4, seed=5, epoch=1)
    assert first != epoch_batches(dataset, aggregated=False, batch_size=4, seed=5, epoch=2)


def test_training_is_reproducible(tmp_path, phantom_corpus):
    config = _tiny()
    first = train(config, manifest=phantom_corpus, checkpoint_dir=tmp_path / "a", device=CPU, progress=False)
    second = train(config, manifest=phantom_corpus, checkpoint_dir=tmp_path / "b", device=CPU, progress=False)
    assert len(first.losses) == 2
    assert all(np.isfinite(first.losses))
    assert first.losses == pytest.approx(second.losses, rel=1e-6)
    assert sorted(first.monitor) == [1, 2]
    assert first.config_hash == second.config_hash

    saved = json.loads((tmp_path / "a" / "phantom_agg_res.record.json").read_text())
    assert TrainingRecord.from_dict(saved).losses == first.losses
    ckpt_a = load_checkpoint(first.checkpoint)
    ckpt_b = load_checkpoint(second.checkpoint)
    assert ckpt_a.manifest_checksum == phantom_corpus.checksum()
    assert ckpt_a.epoch == 2
    pair = phantom_corpus.pair(phantom_corpus.records(TRAIN)[0])
    out_a = forward(ckpt_a.model, pair.incomplete).probabilities
    out_b = forward(ckpt_b.model, pair.incomplete).probabilities
    assert np.allclose(out_a, out_b, atol=1e-5)


def test_intermediate_checkpoints(tmp_path, phantom_corpus):
    config = _tiny(epochs=3, checkpoint_every=1, monitor_every=0)
    record = train(config, manifest=phantom_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False)
    names = sorted(p.name for p in tmp_path.glob("*.pt"))
    assert names == ["phantom_agg_res.pt", "phantom_agg_res_epoch0001.pt", "phantom_agg_res_epoch0002.pt"]
    assert record.checkpoint == str(checkpoint_path(tmp_path, "phantom_agg_res"))
    assert checkpoint_path(tmp_path, "phantom_agg_res", 2).exists()
    assert TrainingRecord.from_dict(json.loads(record_path(tmp_path, "phantom_agg_res").read_text())).checkpoint == record.checkpoint
    assert record.monitor == {}


def test_manifest_must_fit_the_network(phantom_corpus):
    with pytest.raises(ManifestMismatchError):
        check_manifest(load_experiment(preset="phantom_agg_res"), phantom_corpus)
    config = _tiny()
    check_manifest(config, phantom_corpus)
    dropped = phantom_corpus.records(TRAIN)[0]
    phantom_corpus.pairs = [rec for rec in phantom_corpus.pairs if rec is not dropped]
    with pytest.raises(ManifestMismatchError, match="variants"):
        check_manifest(config, phantom_corpus)
    check_manifest(config.for_variant("dae_res"), phantom_corpus)


def test_non_finite_loss_stops_training(tmp_path, phantom_corpus, monkeypatch):
    def broken(model, inputs, targets, config):
        return model(inputs).sum() * float("nan")

    monkeypatch.setattr(trainer, "compute_loss", broken)
    with pytest.raises(NonFiniteLossError) as info:
        train(_tiny(), manifest=phantom_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False)
    assert (info.value.epoch, info.value.batch) == (1, 0)
    assert not torch.are_deterministic_algorithms_enabled()


def test_ablation_suite_trains_every_method(tmp_path, phantom_corpus):
    base = _tiny(epochs=1, monitor_every=0)
    suite = run_ablation_suite(base, manifest=phantom_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False)
    assert not suite.partial
    assert list(suite.records) == ["dae_b", "dae_agg", "dae_res", "dae_agg_res"]
    for name in suite.records:
        assert (tmp_path / f"{name}.pt").exists()
    saved = json.loads((tmp_path / "suite.json").read_text())
    assert saved["partial"] is False
    assert saved["manifest_checksum"] == phantom_corpus.checksum()


@pytest.mark.slow
def test_residual_aggregated_model_learns_the_phantoms(tmp_path, phantom_corpus):
    config = _tiny(epochs=150, learning_rate=1e-3, monitor_every=50)
    record = train(config, manifest=phantom_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False)
    assert record.losses[-1] < 0.5 * record.losses[0]
    assert record.monitor[150] > record.monitor[50] - 0.05


def test_zero_epochs_saves_the_initial_model(tmp_path, phantom_corpus):
    record = train(_tiny(epochs=0, monitor_every=0), manifest=phantom_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False)
    assert record.losses == []
    assert record.final_loss is None
    assert load_checkpoint(record.checkpoint).epoch == 0


def test_ablation_members_hash_differently(tmp_path, phantom_corpus):
    base = _tiny(epochs=1, monitor_every=0)
    suite = run_ablation_suite(base, manifest=phantom_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False)
    hashes = {rec.config_hash for rec in suite.records.values()}
    assert len(hashes) == 4
    again = run_ablation_suite(base, manifest=phantom_corpus, checkpoint_dir=tmp_path / "again", device=CPU, progress=False)
    for name, rec in suite.records.items():
        assert again.records[name].losses == pytest.approx(rec.losses, abs=1e-5)


def test_training_leaves_the_deterministic_flag_as_found(tmp_path, phantom_corpus):
    config = _tiny(epochs=1, monitor_every=0)
    torch.use_deterministic_algorithms(False)
    train(config, manifest=phantom_corpus, checkpoint_dir=tmp_path / "off", device=CPU, progress=False)
    assert not torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        train(config, manifest=phantom_corpus, checkpoint_dir=tmp_path / "on", device=CPU, progress=False)
        assert torch.are_deterministic_algorithms_enabled()
        assert torch.is_deterministic_algorithms_warn_only_enabled()
    finally:
        torch.use_deterministic_algorithms(False)


@pytest.fixture(scope="module")
def desk_corpus():
    """Ten 48^3 phantoms, eight for training and two held out."""

    phantoms = generate_phantoms(default_phantom_spec((48, 48, 48)), 10, seed=7)
    policy = RemovalPolicy(
        thresholds=(0.1, 0.2, 0.4),
        reference=FractionReference.LARGEST_CLASS,
        protected_names=("rib_cage", "spine"),
        seed=7,
    )
    return build_corpus(phantoms, policy, 0.8)


def _desk(preset: str, **extra):
    overrides = {"epochs": 150, "monitor_every": 0, "seed": 13, "dae.input_shape": [48, 48, 48]}
    overrides.update(extra)
    return apply_overrides(load_experiment(preset=preset), overrides)


def _split_dsc(record, manifest, split):
    model = load_checkpoint(record.checkpoint).model
    dataset = PairDataset(manifest, manifest.records(split), model.config)
    return completion_dsc(model, dataset, CPU)


@pytest.mark.slow
def test_desk_model_fits_training_phantoms_and_generalizes(tmp_path, desk_corpus):
    assert len(desk_corpus.subjects(TRAIN)) == 8
    record = train(_desk("phantom_agg_res"), manifest=desk_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False)
    assert _split_dsc(record, desk_corpus, TRAIN) >= 0.90
    assert _split_dsc(record, desk_corpus, TEST) >= 0.75


@pytest.mark.slow
def test_residual_and_aggregation_do_not_hurt_the_baseline(tmp_path, desk_corpus):
    suite = run_ablation_suite(
        _desk("phantom_agg_res"), manifest=desk_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False
    )
    assert not suite.partial
    held_out = {name: _split_dsc(rec, desk_corpus, TEST) for name, rec in suite.records.items()}
    assert held_out["dae_agg_res"] >= held_out["dae_b"] - 0.02
    assert held_out["dae_res"] >= held_out["dae_b"] - 0.02


@pytest.mark.slow
def test_multiclass_model_fits_every_anatomy(tmp_path, desk_corpus):
    config = _desk("phantom_multiclass", **{"dae.num_classes": desk_corpus.num_classes})
    record = train(config, manifest=desk_corpus, checkpoint_dir=tmp_path, device=CPU, progress=False)
    assert _split_dsc(record, desk_corpus, TRAIN) >= 0.85
