# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Tests for mpnn_mcp_server.pipeline.noise_aware.

Closed-form values are checked against hand-derived numbers; gradients of
both losses against central finite differences in double precision.
"""

import math

import pytest
import torch

from mpnn_mcp_server.errors import ConfigError, NumericFailureError
from mpnn_mcp_server.pipeline.noise_aware import (
    NoiseAwareConfig,
    clean_loss,
    entropy_map,
    gate_mask,
    lambda_schedule,
    noisy_loss,
    perturb,
    teacher_mean,
    threshold_schedule,
    total_loss,
)

LN3 = math.log(3)


def pixel(*values, dtype=torch.float64):
    """A single 1×1 probability map, C×1×1."""
    return torch.tensor(values, dtype=dtype).view(-1, 1, 1)


@pytest.fixture
def cfg():
    return NoiseAwareConfig(max_steps=1000)


def test_config_invariants():
    with pytest.raises(ConfigError):
        NoiseAwareConfig(perturbations=0)
    with pytest.raises(ConfigError):
        NoiseAwareConfig(ema_decay=1.5)
    with pytest.raises(ConfigError):
        NoiseAwareConfig(initial_threshold_fraction=0.0)
    with pytest.raises(ConfigError):
        NoiseAwareConfig(max_steps=0)


def test_schedules_need_t_max():
    with pytest.raises(ConfigError):
        lambda_schedule(0, NoiseAwareConfig())


# ==============================
# Perturbation and teacher averaging
# ==============================


def test_perturb_zero_sigma_copies_input():
    image = torch.randn(3, 8, 8)
    stack = perturb(image, 4, 0.0, seed=0)
    assert stack.shape == (4, 3, 8, 8)
    assert all(torch.equal(copy, image) for copy in stack)


def test_perturb_is_seeded():
    image = torch.zeros(3, 8, 8)
    assert torch.equal(perturb(image, 3, 0.1, 7), perturb(image, 3, 0.1, 7))
    assert not torch.equal(perturb(image, 3, 0.1, 7), perturb(image, 3, 0.1, 8))


def test_perturb_noise_std_matches_sigma():
    image = torch.rand(3, 64, 64)
    stack = perturb(image, 8, 0.05, seed=3)
    std = (stack - image).std().item()
    assert abs(std - 0.05) / 0.05 < 0.05


def test_perturb_rejects_negative_sigma():
    with pytest.raises(ValueError):
        perturb(torch.zeros(3, 4, 4), 2, -0.1, 0)


def test_teacher_mean_examples():
    single = torch.softmax(torch.randn(1, 3, 4, 4), dim=1)
    assert torch.equal(teacher_mean(single), single[0])

    stack = torch.stack([pixel(0.0, 1.0, 0.0), pixel(0.0, 0.0, 1.0)])
    assert torch.allclose(teacher_mean(stack), pixel(0.0, 0.5, 0.5))


def test_teacher_mean_matches_elementwise_oracle():
    gen = torch.Generator().manual_seed(0)
    stack = torch.softmax(torch.randn(5, 3, 6, 6, generator=gen), dim=1)
    oracle = sum(stack[m] for m in range(5)) / 5
    mean = teacher_mean(stack)
    assert torch.allclose(mean, oracle, atol=1e-7)
    assert torch.allclose(mean.sum(dim=0), torch.ones(6, 6), atol=1e-6)


# ==============================
# Entropy
# ==============================


def test_entropy_one_hot_is_zero():
    stack = torch.stack([pixel(0.0, 1.0, 0.0)] * 3)
    assert entropy_map(stack).item() == 0.0


def test_entropy_uniform_is_ln3():
    stack = pixel(1 / 3, 1 / 3, 1 / 3).unsqueeze(0)
    assert abs(entropy_map(stack).item() - LN3) < 1e-12


def test_entropy_of_skewed_pixel():
    stack = pixel(0.7, 0.2, 0.1).unsqueeze(0)
    assert entropy_map(stack).item() == pytest.approx(0.8018, abs=1e-4)


def test_entropy_bounded_on_random_stacks():
    gen = torch.Generator().manual_seed(1)
    for _ in range(20):
        logits = torch.randn(4, 2, 3, 8, 8, generator=gen, dtype=torch.float64) * 5
        u = entropy_map(torch.softmax(logits, dim=-3))
        assert u.shape == (2, 8, 8)
        assert (u >= 0).all() and (u <= LN3 + 1e-9).all()


# ==============================
# Schedules
# ==============================


def test_lambda_schedule_values(cfg):
    assert lambda_schedule(0, cfg) == pytest.approx(6.7379e-4, rel=1e-4)
    assert lambda_schedule(0, cfg) == pytest.approx(0.1 * math.exp(-5), rel=1e-9)
    assert lambda_schedule(500, cfg) == pytest.approx(0.1 * math.exp(-1.25), rel=1e-9)
    assert lambda_schedule(500, cfg) == pytest.approx(2.8650e-2, rel=1e-4)
    assert lambda_schedule(1000, cfg) == pytest.approx(0.1, rel=1e-9)


def test_lambda_strictly_increasing_and_bounded(cfg):
    values = [lambda_schedule(t, cfg) for t in range(1, 1000)]
    assert all(a < b for a, b in zip(values, values[1:]))
    assert max(values) <= cfg.max_consistency_weight


def test_threshold_schedule_values(cfg):
    assert threshold_schedule(0, cfg) == pytest.approx(
        (0.75 + 0.25 * math.exp(-5)) * LN3, rel=1e-12
    )
    assert threshold_schedule(0, cfg) == pytest.approx(0.8259, abs=1e-4)
    assert abs(threshold_schedule(1000, cfg) - LN3) < 1e-12
    steps = [0, 250, 500, 750, 1000]
    values = [threshold_schedule(t, cfg) for t in steps]
    assert values == sorted(values)


# ==============================
# Losses
# ==============================


def test_clean_loss_examples():
    labels = torch.tensor([[[0, 1], [2, 1]]])
    clean = torch.ones(1, 2, 2, dtype=torch.bool)
    perfect = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double()
    assert clean_loss(perfect, labels, clean).item() == 0.0

    uniform = torch.full((1, 3, 2, 2), 1 / 3, dtype=torch.float64)
    partial = torch.tensor([[[True, False], [False, True]]])
    assert clean_loss(uniform, labels, partial).item() == pytest.approx(LN3)

    probs = uniform.clone()
    probs[0, :, 0, 0] = torch.tensor([0.5, 0.25, 0.25])
    single = torch.zeros(1, 2, 2, dtype=torch.bool)
    single[0, 0, 0] = True
    assert clean_loss(probs, labels, single).item() == pytest.approx(0.6931, abs=1e-4)


def test_clean_loss_empty_clean_set_is_zero():
    probs = torch.full((2, 3, 2, 2), 1 / 3)
    labels = torch.zeros(2, 2, 2, dtype=torch.long)
    clean = torch.zeros(2, 2, 2, dtype=torch.bool)
    assert torch.equal(clean_loss(probs, labels, clean), torch.zeros(2))


def test_noisy_loss_examples():
    noisy = torch.zeros(1, 1, 1, dtype=torch.bool)
    u = torch.zeros(1, 1, 1)
    p_s = pixel(1.0, 0.0, 0.0, dtype=torch.float32).unsqueeze(0)
    p_t = pixel(0.0, 1.0, 0.0, dtype=torch.float32).unsqueeze(0)
    assert noisy_loss(p_s, p_s, u, 0.5, noisy).item() == 0.0
    assert noisy_loss(p_s, p_t, u, 0.5, noisy).item() == pytest.approx(2.0)
    # empty gate: u >= H everywhere
    assert noisy_loss(p_s, p_t, u + 1.0, 0.5, noisy).item() == 0.0
    # gate is strict
    assert noisy_loss(p_s, p_t, u + 0.5, 0.5, noisy).item() == 0.0


def test_gate_shrinks_with_threshold(rng):
    u = torch.from_numpy(rng.uniform(0, LN3, size=(2, 8, 8)))
    clean = torch.from_numpy(rng.random((2, 8, 8)) < 0.5)
    for low, high in [(0.2, 0.5), (0.5, 0.9), (0.9, LN3)]:
        small, large = gate_mask(u, low, clean), gate_mask(u, high, clean)
        assert not (small & ~large).any()
    assert not (gate_mask(u, 10.0, clean) & clean).any()


def _random_case(rng, dtype=torch.float64):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 31)))
    logits = torch.randn(2, 3, 4, 4, generator=gen, dtype=dtype)
    labels = torch.randint(0, 3, (2, 4, 4), generator=gen)
    clean = torch.rand(2, 4, 4, generator=gen) < 0.5
    teacher = torch.softmax(torch.randn(2, 3, 4, 4, generator=gen, dtype=dtype), dim=1)
    u = torch.rand(2, 4, 4, generator=gen, dtype=dtype) * LN3
    return logits, labels, clean, teacher, u


def test_clean_loss_gradient_matches_finite_differences(rng):
    logits, labels, clean, _, _ = _random_case(rng)
    logits.requires_grad_(True)

    def fn(x):
        return clean_loss(torch.softmax(x, dim=1), labels, clean)

    assert torch.autograd.gradcheck(fn, (logits,), eps=1e-5, atol=1e-8, rtol=1e-4)


def test_noisy_loss_gradient_matches_finite_differences(rng):
    logits, _, clean, teacher, u = _random_case(rng)
    logits.requires_grad_(True)

    def fn(x):
        return noisy_loss(torch.softmax(x, dim=1), teacher, u, 0.8, clean)

    assert torch.autograd.gradcheck(fn, (logits,), eps=1e-5, atol=1e-8, rtol=1e-4)


def test_losses_ignore_excluded_pixels(rng):
    logits, labels, clean, teacher, u = _random_case(rng)
    probs = torch.softmax(logits, dim=1)
    shifted = torch.softmax(logits + 3.0 * torch.randn_like(logits), dim=1)

    on_noisy = torch.where(clean.unsqueeze(1), probs, shifted)
    assert torch.equal(clean_loss(probs, labels, clean), clean_loss(on_noisy, labels, clean))

    on_clean = torch.where(clean.unsqueeze(1), shifted, probs)
    assert torch.equal(
        noisy_loss(probs, teacher, u, 0.8, clean),
        noisy_loss(on_clean, teacher, u, 0.8, clean),
    )


def test_noisy_loss_does_not_reach_teacher():
    p_s = torch.softmax(torch.randn(1, 3, 2, 2), dim=1).requires_grad_(True)
    p_t = torch.softmax(torch.randn(1, 3, 2, 2), dim=1).requires_grad_(True)
    clean = torch.zeros(1, 2, 2, dtype=torch.bool)
    noisy_loss(p_s, p_t, torch.zeros(1, 2, 2), 1.0, clean).sum().backward()
    assert p_t.grad is None
    assert p_s.grad is not None


def test_total_loss_examples(cfg):
    assert total_loss(0.7, 0.0, 10, cfg) == 0.7
    assert total_loss(0.0, 1.0, 1000, cfg) == pytest.approx(0.1)
    assert total_loss(0.5, 0.2, 1000, cfg) == pytest.approx(0.52)


def test_total_loss_rejects_non_finite(cfg):
    with pytest.raises(NumericFailureError):
        total_loss(float("nan"), 0.0, 0, cfg)
    with pytest.raises(NumericFailureError):
        total_loss(torch.tensor([0.1, float("inf")]), torch.zeros(2), 0, cfg)
