# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Loss machinery of noise-aware teacher/student training.

Probability tensors are channels-first; the class axis is always ``-3``, so
``N×C×H×W`` maps and ``M×N×C×H×W`` perturbation stacks share the helpers.
Per-image losses are returned as length-N vectors.
"""

import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import torch
import torch.nn.functional as F

from ..errors import ConfigError, NumericFailureError

CLASS_DIM = -3

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class NoiseAwareConfig:
    """Hyper-parameters of the noise-aware objective.

    Args:
        perturbations: Number M of Gaussian-perturbed teacher inputs
        noise_std: Std of the input perturbation, standardized-intensity units
        ema_decay: Teacher EMA decay α
        max_consistency_weight: Ramp ceiling w_max of λ(t)
        max_steps: t_max; None means "derive from the run length"
        clean_weight: β, weight of the clean-pixel loss
        initial_threshold_fraction: H(0) as a fraction of ln C, before ramp
        num_classes: C
    """

    perturbations: int = 8
    noise_std: float = 0.05
    ema_decay: float = 0.99
    max_consistency_weight: float = 0.1
    max_steps: Optional[int] = None
    clean_weight: float = 1.0
    initial_threshold_fraction: float = 0.75
    num_classes: int = 3

    def __post_init__(self):
        if self.perturbations < 1:
            raise ConfigError("perturbations (M) must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        # 1.0 freezes the teacher at its initialization
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in [0, 1]")
        if self.max_consistency_weight < 0:
            raise ConfigError("max_consistency_weight must be >= 0")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")
        if not 0.0 < self.initial_threshold_fraction <= 1.0:
            raise ConfigError("initial_threshold_fraction must be in (0, 1]")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def max_entropy(self) -> float:
        return math.log(self.num_classes)

    def to_dict(self) -> dict:
        return asdict(self)


def perturb(
    image: torch.Tensor,
    m: int,
    sigma: float,
    seed: Union[int, torch.Generator],
) -> torch.Tensor:
    """Stack ``m`` copies of ``image`` with independent Gaussian noise added.

    ``seed`` may be an int or a generator whose state advances.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    generator = seed
    if not isinstance(seed, torch.Generator):
        generator = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(
        (m, *image.shape), generator=generator, dtype=image.dtype, device="cpu"
    ).to(image.device)
    return image.unsqueeze(0) + sigma * noise


def teacher_mean(prob_stack: torch.Tensor) -> torch.Tensor:
    """Average of the M teacher predictions (leading axis)."""
    return prob_stack.mean(dim=0)


def entropy_map(prob_stack: torch.Tensor) -> torch.Tensor:
    """Entropy (natural log) of the averaged prediction, per pixel.

    ``0·log 0`` is taken as 0; values lie in ``[0, ln C]``.
    """
    mean = teacher_mean(prob_stack)
    entropy = -torch.special.xlogy(mean, mean).sum(dim=CLASS_DIM)
    return entropy.clamp_min(0.0)


def gaussian_rampup(t: float, t_max: float) -> float:
    """``exp(-5 (1 - t/t_max)^2)`` with ``t`` clipped to ``[0, t_max]``."""
    if t_max <= 0:
        return 1.0
    phase = 1.0 - min(max(t, 0.0), t_max) / t_max
    return math.exp(-5.0 * phase * phase)


def _t_max(cfg: NoiseAwareConfig) -> int:
    if cfg.max_steps is None:
        raise ConfigError("max_steps (t_max) is not set on the noise-aware config")
    return cfg.max_steps


def threshold_schedule(t: int, cfg: NoiseAwareConfig) -> float:
    """Uncertainty gate H(t), ramping from ``H0_frac·ln C`` up to ``ln C``."""
    h0 = cfg.initial_threshold_fraction
    ramp = gaussian_rampup(t, _t_max(cfg))
    return (h0 + (1.0 - h0) * ramp) * cfg.max_entropy


def lambda_schedule(t: int, cfg: NoiseAwareConfig) -> float:
    """Consistency weight λ(t) = w_max · exp(-5 (1 - t/t_max)^2)."""
    return cfg.max_consistency_weight * gaussian_rampup(t, _t_max(cfg))


def clean_loss(
    student_probs: torch.Tensor, labels: torch.Tensor, clean: torch.Tensor
) -> torch.Tensor:
    """Cross-entropy averaged over each image's clean pixels.

    Args:
        student_probs: N×C×H×W student probabilities P_s
        labels: N×H×W integer labels Y
        clean: N×H×W boolean clean-pixel mask

    Returns:
        Length-N losses; an image without clean pixels contributes 0
    """
    log_probs = torch.log(student_probs.clamp_min(torch.finfo(student_probs.dtype).tiny))
    pixel_ce = F.nll_loss(log_probs, labels.long(), reduction="none")
    weights = clean.to(pixel_ce.dtype)
    count = weights.sum(dim=(-2, -1))
    total = (pixel_ce * weights).sum(dim=(-2, -1))
    return torch.where(count > 0, total / count.clamp_min(1.0), torch.zeros_like(total))


def gate_mask(
    uncertainty: torch.Tensor, threshold: float, clean: torch.Tensor
) -> torch.Tensor:
    """Noisy pixels whose uncertainty is strictly below the gate H."""
    return torch.logical_and(~clean.bool(), uncertainty < threshold)


def noisy_loss(
    student_probs: torch.Tensor,
    teacher_probs: torch.Tensor,
    uncertainty: torch.Tensor,
    threshold: float,
    clean: torch.Tensor,
) -> torch.Tensor:
    """Uncertainty-gated consistency on noisy pixels.

    The per-pixel term is the squared Euclidean distance between the student
    and teacher class vectors, averaged over gated pixels of each image.

    Returns:
        Length-N losses; an image with an empty gate contributes 0
    """
    gate = gate_mask(uncertainty, threshold, clean).to(student_probs.dtype)
    distance = (student_probs - teacher_probs.detach()).pow(2).sum(dim=CLASS_DIM)
    count = gate.sum(dim=(-2, -1))
    total = (distance * gate).sum(dim=(-2, -1))
    return torch.where(count > 0, total / count.clamp_min(1.0), torch.zeros_like(total))


def total_loss(l_cl: Number, l_no: Number, t: int, cfg: NoiseAwareConfig) -> Number:
    """β·L_cl + λ(t)·L_no; raises on non-finite input."""
    for name, value in (("clean loss", l_cl), ("noisy loss", l_no)):
        finite = (
            torch.isfinite(value).all().item()
            if isinstance(value, torch.Tensor)
            else math.isfinite(value)
        )
        if not finite:
            raise NumericFailureError(f"{name} is not finite")
    return cfg.clean_weight * l_cl + lambda_schedule(t, cfg) * l_no
