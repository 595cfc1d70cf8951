import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import refineseg.losses as losses
from refineseg.losses import bce_loss, dice_loss, downsample_target, mask_loss, total_loss

from .conftest import autograd_of, central_difference, relative_error


def test_bce_at_zero_logits_is_ln2():
    t = (torch.rand(1, 1, 8, 8) > 0.5).double()
    assert abs(bce_loss(torch.zeros(1, 1, 8, 8, dtype=torch.float64), t).item() - math.log(2)) < 1e-12


def test_bce_saturated_matching_target():
    t = (torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(0)) > 0.5).float()
    assert bce_loss(40 * t - 20, t).item() < 1e-8
    assert bce_loss(20 * t - 10, t).item() > bce_loss(40 * t - 20, t).item()


def test_bce_and_dice_gradients():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(1, 1, 6, 6, generator=gen, dtype=torch.float64)
    t = torch.rand(1, 1, 6, 6, generator=gen, dtype=torch.float64)
    for fn in (lambda z: bce_loss(z, t), lambda z: dice_loss(z, t)):
        assert relative_error(autograd_of(fn, x), central_difference(fn, x)) < 1e-3


def test_dice_perfect_prediction():
    t = torch.zeros(1, 1, 20, 20, dtype=torch.float64)
    t.view(-1)[:100] = 1
    assert dice_loss(2e4 * t - 1e4, t).item() == 0.0


def test_dice_half_probability():
    t = torch.zeros(1, 1, 8, 8)
    t.view(-1)[:32] = 1
    expected = 1 - (2 * 16 + 1) / (32 + 32 + 1)
    assert abs(dice_loss(torch.zeros(1, 1, 8, 8), t).item() - expected) < 1e-7
    assert abs(expected - 0.4923) < 1e-4
    # epsilon -> 0 limit
    assert abs(dice_loss(torch.zeros(1, 1, 8, 8, dtype=torch.float64), t.double(), eps=1e-12).item() - 0.5) < 1e-9


def test_dice_empty_target_zero_prediction():
    t = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    assert dice_loss(torch.full((1, 1, 8, 8), -1e4, dtype=torch.float64), t).item() == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 5, 4))


def _perfect(target):
    return 2e4 * target - 1e4


def test_total_loss_with_perfect_intermediates_equals_final():
    gen = torch.Generator().manual_seed(1)
    target = (torch.rand(1, 1, 16, 16, generator=gen) > 0.7).double()
    final = torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    inters = [_perfect((downsample_target(target, (s, s)) > 0.5).double()) for s in (4, 8, 8)]
    # intermediate targets are soft, so use block-constant masks where the soft target is binary
    target = torch.kron(torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64), torch.ones(8, 8))[None, None]
    inters = [_perfect(downsample_target(target, (s, s))) for s in (2, 4, 4)]
    assert total_loss(final, inters, target).item() == mask_loss(final, target).item()


def test_total_loss_weights_match_formula(monkeypatch):
    values = iter([0.0, 1.0, 1.0, 1.0])
    monkeypatch.setattr(losses, "mask_loss", lambda logits, target: next(values))
    z = torch.zeros(1, 1, 8, 8)
    assert abs(losses.total_loss(z, [z[..., :4, :4], z, z], z) - 0.9) < 1e-12


def test_total_loss_is_linear_in_weights():
    gen = torch.Generator().manual_seed(2)
    target = (torch.rand(2, 1, 16, 16, generator=gen) > 0.5).double()
    final = torch.randn(2, 1, 16, 16, generator=gen, dtype=torch.float64)
    inters = [torch.randn(2, 1, s, s, generator=gen, dtype=torch.float64) for s in (4, 8, 8)]
    lf = mask_loss(final, target).item()
    li = sum(mask_loss(i, downsample_target(target, i.shape[-2:])).item() for i in inters)
    for a, b in [(1.0, 0.3), (2.0, 0.0), (0.5, 1.7)]:
        assert abs(total_loss(final, inters, target, a, b).item() - (a * lf + b * li)) < 1e-12
    assert total_loss(final, inters, target, 1.0, 0.0).item() == lf


def test_total_loss_requires_three_intermediates():
    z = torch.zeros(1, 1, 8, 8)
    with pytest.raises(ValueError):
        total_loss(z, [z, z], z)


def test_intermediate_targets_stay_soft():
    t = torch.zeros(1, 1, 4, 4)
    t[0, 0, 0, 0] = 1
    assert downsample_target(t, (2, 2))[0, 0, 0, 0].item() == 0.25


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 30))
def test_losses_are_bounded(seed, scale):
    gen = torch.Generator().manual_seed(seed)
    logits = scale * torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64)
    target = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64).round()
    assert bce_loss(logits, target).item() >= 0
    d = dice_loss(logits, target).item()
    assert 0 <= d <= 1
