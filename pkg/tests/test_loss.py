import math

import pytest
import torch

from models.lgnet import ForwardOutputs, deep_supervision_loss
from utils.exceptions import ShapeError


def constant_outputs(value: float, shape=(1, 1, 8, 8)) -> ForwardOutputs:
    return ForwardOutputs(
        final=torch.full(shape, value),
        side_outputs=[torch.full(shape, value) for _ in range(6)],
    )


def naive_bce(prob: torch.Tensor, gt: torch.Tensor, eps: float = 1e-7) -> float:
    total = 0.0
    p_flat, g_flat = prob.flatten().tolist(), gt.flatten().tolist()
    for p, g in zip(p_flat, g_flat):
        p = min(max(p, eps), 1 - eps)
        total += -(g * math.log(p) + (1 - g) * math.log(1 - p))
    return total / len(p_flat)


def test_half_probability_gives_seven_ln2():
    gt = torch.zeros(1, 1, 8, 8)
    gt[..., 2:4, 2:4] = 1
    loss = deep_supervision_loss(constant_outputs(0.5), gt)
    assert loss.item() == pytest.approx(7 * math.log(2), abs=1e-4)


def test_perfect_prediction_is_near_zero():
    gt = torch.zeros(1, 1, 8, 8)
    gt[..., 3, 3] = 1
    outputs = ForwardOutputs(final=gt.clone(), side_outputs=[gt.clone() for _ in range(6)])
    loss = deep_supervision_loss(outputs, gt)
    assert 0 <= loss.item() <= 7e-6


def test_matches_per_pixel_sum():
    gen = torch.Generator().manual_seed(0)
    gt = (torch.rand(2, 1, 5, 5, generator=gen) > 0.7).float()
    maps = [torch.rand(2, 1, 5, 5, generator=gen, dtype=torch.float64) for _ in range(7)]
    outputs = ForwardOutputs(final=maps[-1], side_outputs=maps[:-1])
    expected = sum(naive_bce(m, gt) for m in maps)
    assert deep_supervision_loss(outputs, gt).item() == pytest.approx(expected, rel=1e-9)


def test_saturated_wrong_prediction_is_finite():
    gt = torch.ones(1, 1, 4, 4)
    loss = deep_supervision_loss(constant_outputs(0.0, (1, 1, 4, 4)), gt)
    assert math.isfinite(loss.item())
    assert loss.item() == pytest.approx(7 * -math.log(1e-7), rel=1e-3)


def test_gradient_flows_to_all_maps():
    maps = [torch.full((1, 1, 4, 4), 0.3, requires_grad=True) for _ in range(7)]
    outputs = ForwardOutputs(final=maps[-1], side_outputs=maps[:-1])
    deep_supervision_loss(outputs, torch.ones(1, 1, 4, 4)).backward()
    assert all(m.grad is not None and torch.count_nonzero(m.grad) == 16 for m in maps)


def test_shape_mismatch():
    with pytest.raises(ShapeError, match="shape mismatch"):
        deep_supervision_loss(constant_outputs(0.5), torch.zeros(1, 1, 4, 4))
