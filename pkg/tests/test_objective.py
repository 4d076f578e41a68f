from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
import torch

from anatomy_completion.errors import ConfigError, ShapeError
from anatomy_completion.network import FinalActivation, build_dae
from anatomy_completion.objective import (
    LossConfig,
    LossMapping,
    Reduction,
    compute_loss,
    dice_coefficient,
    dice_loss,
    full_loss,
    multiclass_loss,
    residual_loss,
    sample_dice_losses,
)


def test_dice_extremes_and_hand_case():
    y = np.array([1, 1, 0, 0], dtype=np.float64)
    assert dice_coefficient(y, y).item() == pytest.approx(1.0)
    assert dice_coefficient(y, 1 - y).item() == pytest.approx(0.0, abs=1e-6)
    assert dice_coefficient(y, [1, 0, 1, 0]).item() == pytest.approx(0.5, abs=1e-6)
    assert dice_loss(y, [1, 0, 1, 0]).item() == pytest.approx(0.5, abs=1e-6)


def test_dice_is_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.random((4, 5, 6)), rng.random((4, 5, 6))
    assert dice_coefficient(a, b).item() == pytest.approx(dice_coefficient(b, a).item())


def test_empty_against_empty_is_perfect_without_smoothing():
    zeros = np.zeros((2, 2, 2))
    assert dice_coefficient(zeros, zeros, eps=0.0).item() == 1.0
    assert dice_coefficient(zeros, zeros).item() == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_coefficient(np.zeros((2, 2)), np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_dice_gradient_matches_finite_differences(seed):
    gen = torch.Generator().manual_seed(seed)
    y = (torch.rand(4, 4, 4, generator=gen, dtype=torch.float64) > 0.5).to(torch.float64)
    p = torch.rand(4, 4, 4, generator=gen, dtype=torch.float64).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda q: dice_loss(y, q), (p,), eps=1e-6, atol=1e-6)


def _residual_case(seed):
    gen = torch.Generator().manual_seed(seed)
    x = (torch.rand(2, 1, 4, 4, 4, generator=gen, dtype=torch.float64) > 0.6).to(torch.float64)
    y = torch.clamp(x + (torch.rand(x.shape, generator=gen, dtype=torch.float64) > 0.7).to(torch.float64), 0, 1)
    # x + r stays strictly inside (0, 1) wherever x is empty
    r = 0.1 + 0.3 * torch.rand(x.shape, generator=gen, dtype=torch.float64)
    return x, torch.where(x == 0, r, torch.zeros_like(r)), y


@pytest.mark.parametrize("seed", range(20))
def test_residual_gradient_matches_finite_differences(seed):
    x, r, y = _residual_case(seed)
    config = LossConfig(mapping=LossMapping.RESIDUAL)
    free = x == 0
    assert torch.autograd.gradcheck(
        lambda q: residual_loss(x, torch.where(free, q, torch.zeros_like(q)), y, config),
        (r.clone().requires_grad_(True),),
        eps=1e-6,
        atol=1e-6,
    )


@pytest.mark.parametrize("seed", range(5))
def test_residual_loss_equals_full_loss_on_the_sum(seed):
    x, r, y = _residual_case(seed)
    config = LossConfig()
    assert residual_loss(x, r, y, config).item() == pytest.approx(full_loss(x + r, y, config).item(), abs=1e-12)
    assert residual_loss(x, y - x, y, config).item() == pytest.approx(full_loss(y, y, config).item(), abs=1e-12)


def test_aggregated_loss_is_the_sum_of_its_terms():
    gen = torch.Generator().manual_seed(7)
    y = (torch.rand(6, 1, 4, 4, 4, generator=gen, dtype=torch.float64) > 0.5).to(torch.float64)
    p = torch.rand(6, 1, 4, 4, 4, generator=gen, dtype=torch.float64)
    terms = [dice_loss(y[i], p[i]).item() for i in range(6)]
    assert full_loss(p, y, LossConfig()).item() == pytest.approx(sum(terms), abs=1e-12)
    first, rest = full_loss(p[:3], y[:3], LossConfig()), full_loss(p[3:], y[3:], LossConfig())
    assert full_loss(p, y, LossConfig()).item() == pytest.approx((first + rest).item(), abs=1e-12)


def test_sample_losses_and_reduction():
    y = torch.zeros(3, 1, 2, 2, 2, dtype=torch.float64)
    y[:, :, 0] = 1
    p = y.clone()
    p[1] = 1 - y[1]
    terms = sample_dice_losses(y, p)
    assert terms.tolist() == pytest.approx([0.0, 1.0, 0.0], abs=1e-6)
    assert full_loss(p, y, LossConfig()).item() == pytest.approx(1.0, abs=1e-6)
    assert full_loss(p, y, LossConfig(reduction=Reduction.MEAN)).item() == pytest.approx(1 / 3, abs=1e-6)


def test_residual_loss_uses_the_input():
    x = torch.zeros(1, 1, 2, 2, 2, dtype=torch.float64)
    x[..., 0] = 1
    y = torch.ones_like(x)
    r = 1 - x
    assert residual_loss(x, r, y, LossConfig()).item() == pytest.approx(0.0, abs=1e-6)
    assert residual_loss(x, torch.zeros_like(x), y, LossConfig()).item() == pytest.approx(1 - 8 / 12, abs=1e-6)


def test_multiclass_loss_weights_channels():
    y = np.zeros((2, 2, 2, 2))
    y[0, 0] = 1
    y[1, 1] = 1
    assert multiclass_loss(y, y).item() == pytest.approx(0.0, abs=1e-6)
    p = y.copy()
    p[1] = 0
    p[0] = 1
    # channel 0 dice 2*4/(4+8) and channel 1 dice ~0
    unweighted = multiclass_loss(y, p).item()
    assert unweighted == pytest.approx(((1 - 8 / 12) + 1) / 2, abs=1e-6)
    weighted = multiclass_loss(y, p, weights=[3.0, 1.0]).item()
    assert weighted == pytest.approx((3 * (1 - 8 / 12) + 1) / 4, abs=1e-6)
    with pytest.raises(ShapeError):
        multiclass_loss(y, p, weights=[1.0])
    with pytest.raises(ShapeError):
        multiclass_loss(y[:1], p[:1])


def test_mapping_must_match_the_model(tiny_dae):
    x = torch.zeros(1, 1, *tiny_dae.input_shape)
    full_model = build_dae(tiny_dae)
    residual_model = build_dae(replace(tiny_dae, residual=True))
    with pytest.raises(ConfigError):
        compute_loss(full_model, x, x, LossConfig(mapping=LossMapping.RESIDUAL))
    with pytest.raises(ConfigError):
        compute_loss(residual_model, x, x, LossConfig())
    loss = compute_loss(residual_model, x, x, LossConfig(mapping=LossMapping.RESIDUAL))
    assert loss.ndim == 0 and 0.0 <= loss.item() <= 1.0


def test_multiclass_model_dispatches_to_channel_dice(tiny_dae):
    config = replace(tiny_dae, num_classes=3, final_activation=FinalActivation.SOFTMAX)
    model = build_dae(config)
    x = torch.zeros(2, 3, *config.input_shape)
    x[:, 0] = 1
    loss = compute_loss(model, x, x, LossConfig(class_weights=(1.0, 2.0, 2.0)))
    loss.backward()
    assert 0.0 <= loss.item() <= 2.0
    assert all(p.grad is not None for p in model.parameters())


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(smooth_eps=-1).validate()
    with pytest.raises(ConfigError):
        LossConfig(class_weights=(1.0, 0.0)).validate()
    with pytest.raises(ConfigError, match="aggregated"):
        LossConfig.from_dict({"aggregate": True})


@pytest.mark.parametrize("seed", range(20))
def test_multiclass_gradient_matches_finite_differences(seed):
    gen = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, 3, (4, 4, 4), generator=gen)
    y = torch.nn.functional.one_hot(labels, 3).permute(3, 0, 1, 2).to(torch.float64)
    logits = torch.randn(3, 4, 4, 4, generator=gen, dtype=torch.float64).requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda q: multiclass_loss(y, torch.softmax(q, dim=0), weights=[1.0, 2.0, 0.5]), (logits,), eps=1e-6, atol=1e-6
    )


def test_permuting_classes_with_their_weights_keeps_the_loss():
    rng = np.random.default_rng(3)
    y = np.eye(3)[rng.integers(0, 3, size=(4, 4, 4))].transpose(3, 0, 1, 2)
    p = rng.random((3, 4, 4, 4))
    order = [2, 0, 1]
    weights = np.array([1.0, 2.0, 3.0])
    base = multiclass_loss(y, p, weights=weights).item()
    assert multiclass_loss(y[order], p[order], weights=weights[order]).item() == pytest.approx(base)
