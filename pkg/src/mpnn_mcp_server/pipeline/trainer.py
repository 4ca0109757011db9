# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Supervised baseline and noise-aware teacher/student training loops."""

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional, Union

import numpy as np
import torch
from tqdm import tqdm

from ..errors import ConfigError, NumericFailureError
from .datasets import LabeledDataset
from .model import (
    ArchConfig,
    LinkNet,
    check_compatible,
    forward,
    get_arch,
    init_network,
    network_from_state,
)
from .noise_aware import (
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

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Recipe:
    """Optimizer recipe: Adam with a step-decayed learning rate."""

    lr: float = 5e-4
    decay_every: int = 2000
    decay_factor: float = 0.1
    epochs: int = 100
    batch_size: int = 8
    betas: tuple[float, float] = field(default=(0.9, 0.99))
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError("decay_factor must be in (0, 1)")
        if self.decay_every <= 0:
            raise ConfigError("decay_every must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def steps_per_epoch(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.batch_size)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data


def lr_at(step: int, recipe: Recipe) -> float:
    """``lr0 · decay_factor^⌊step / decay_every⌋``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return recipe.lr * recipe.decay_factor ** (step // recipe.decay_every)


def make_optimizer(net: torch.nn.Module, recipe: Recipe) -> torch.optim.Adam:
    return torch.optim.Adam(
        net.parameters(),
        lr=recipe.lr,
        betas=recipe.betas,
        weight_decay=recipe.weight_decay,
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.backends.cudnn.benchmark = False
    torch.backends.cudnn.deterministic = True


def derive_seeds(seed: int) -> tuple[int, int]:
    """Independent seeds for (data order, input perturbations)."""
    order, noise = np.random.SeedSequence(seed).generate_state(2)
    return int(order), int(noise)


def epoch_batches(
    n: int, batch_size: int, generator: torch.Generator
) -> Iterator[list[int]]:
    order = torch.randperm(n, generator=generator).tolist()
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _collate(dataset: LabeledDataset, indices: list[int]):
    items = [dataset[i] for i in indices]
    images = torch.stack([item[0] for item in items])
    labels = torch.stack([item[1] for item in items])
    return images, labels


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float):
    """θ̃ ← α·θ̃ + (1-α)·θ over every floating tensor (parameters and BN stats).

    Integer buffers are copied from the student. Returns ``teacher``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    check_compatible(teacher, student)
    student_state = student.state_dict()
    for name, tensor in teacher.state_dict().items():
        source = student_state[name]
        if tensor.dtype.is_floating_point:
            tensor.mul_(alpha).add_(source, alpha=1.0 - alpha)
        else:
            tensor.copy_(source)
    return teacher


class MetricsLog:
    """Append-only JSON-lines log of per-step training metrics."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _dump_batch(dump_dir: Optional[Path], step: int, **tensors) -> Optional[str]:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"nonfinite_step{step:07d}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(tensors, path)
    return str(path)


# ==============================
# Supervised training
# ==============================


def train_supervised(
    net: LinkNet,
    dataset: LabeledDataset,
    recipe: Recipe,
    seed: int,
    on_epoch_end: Optional[Callable[[int, LinkNet], bool]] = None,
    epochs: Optional[int] = None,
    log: Optional[MetricsLog] = None,
    progress: bool = False,
) -> LinkNet:
    """Plain cross-entropy on every pixel against the dataset's labels.

    Args:
        net: Network to train in place
        dataset: Training samples
        recipe: Optimizer recipe
        seed: Seeds the shuffling order
        on_epoch_end: Called as ``(epoch, net)`` after each epoch; returning
            True stops training
        epochs: Overrides ``recipe.epochs``
        log: Optional per-step metrics sink
        progress: Show a progress bar
    """
    epochs = recipe.epochs if epochs is None else epochs
    order_seed, _ = derive_seeds(seed)
    generator = torch.Generator().manual_seed(order_seed)
    optimizer = make_optimizer(net, recipe)
    step = 0
    for epoch in tqdm(range(1, epochs + 1), desc="epochs", disable=not progress):
        net.train()
        for indices in epoch_batches(len(dataset), recipe.batch_size, generator):
            images, labels = _collate(dataset, indices)
            probs = forward(net, images)
            everything = torch.ones_like(labels, dtype=torch.bool)
            loss = clean_loss(probs, labels, everything).mean()
            if not torch.isfinite(loss):
                ids = [dataset.samples[i].id for i in indices]
                raise NumericFailureError(f"non-finite loss at step {step}", ids)
            lr = lr_at(step, recipe)
            _set_lr(optimizer, lr)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if log is not None:
                log.write({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()})
            step += 1
        if on_epoch_end is not None and on_epoch_end(epoch, net):
            break
    return net


def train_baseline(
    dataset: LabeledDataset,
    recipe: Recipe,
    seed: int,
    arch: Union[str, ArchConfig] = "linknet",
    log: Optional[MetricsLog] = None,
    progress: bool = False,
) -> LinkNet:
    """Fully supervised reference network on the (noisy) labels."""
    net = init_network(arch, seed)
    return train_supervised(net, dataset, recipe, seed, log=log, progress=progress)


# ==============================
# Noise-aware teacher/student training
# ==============================


@dataclass
class TrainState:
    """Everything needed to continue a teacher/student run bit-for-bit."""

    student: LinkNet
    teacher: LinkNet
    optimizer: torch.optim.Optimizer
    cfg: NoiseAwareConfig
    recipe: Recipe
    seed: int
    order_generator: torch.Generator
    noise_generator: torch.Generator
    supervise_all: bool = False
    step: int = 0
    epoch: int = 0
    empty_clean: int = 0
    empty_gate: int = 0

    @classmethod
    def create(
        cls,
        arch: Union[str, ArchConfig],
        seed: int,
        recipe: Recipe,
        cfg: NoiseAwareConfig,
        n_samples: int,
        supervise_all: bool = False,
    ) -> "TrainState":
        """Fresh state; the teacher starts as a copy of the student.

        ``cfg.max_steps`` is set to the run's actual step count unless given.
        """
        student = init_network(arch, seed)
        teacher = copy.deepcopy(student)
        for param in teacher.parameters():
            param.requires_grad_(False)
        teacher.eval()
        if cfg.max_steps is None:
            total = recipe.epochs * recipe.steps_per_epoch(n_samples)
            cfg = replace(cfg, max_steps=max(total, 1))
        order_seed, noise_seed = derive_seeds(seed)
        return cls(
            student=student,
            teacher=teacher,
            optimizer=make_optimizer(student, recipe),
            cfg=cfg,
            recipe=recipe,
            seed=seed,
            order_generator=torch.Generator().manual_seed(order_seed),
            noise_generator=torch.Generator().manual_seed(noise_seed),
            supervise_all=supervise_all,
        )

    def state_dict(self) -> dict:
        return {
            "arch": self.student.arch.to_dict(),
            "seed": self.seed,
            "step": self.step,
            "epoch": self.epoch,
            "student": self.student.state_dict(),
            "teacher": self.teacher.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "order_generator": self.order_generator.get_state(),
            "noise_generator": self.noise_generator.get_state(),
            "noise_aware": self.cfg.to_dict(),
            "recipe": self.recipe.to_dict(),
            "supervise_all": self.supervise_all,
            "empty_clean": self.empty_clean,
            "empty_gate": self.empty_gate,
        }

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)

    @classmethod
    def load(
        cls, path: Union[str, Path], arch: Optional[Union[str, ArchConfig]] = None
    ) -> "TrainState":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if "teacher" not in payload or "optimizer" not in payload:
            raise ConfigError(f"{path} is not a teacher/student training checkpoint")
        saved = ArchConfig.from_dict(payload["arch"])
        if arch is not None and get_arch(arch) != saved:
            raise ConfigError(f"checkpoint architecture {saved.name} does not match")
        student = network_from_state(saved, payload["student"], payload["seed"])
        teacher = network_from_state(saved, payload["teacher"], payload["seed"])
        for param in teacher.parameters():
            param.requires_grad_(False)
        teacher.eval()
        recipe = Recipe(**payload["recipe"])
        optimizer = make_optimizer(student, recipe)
        optimizer.load_state_dict(payload["optimizer"])
        order_generator = torch.Generator()
        order_generator.set_state(payload["order_generator"])
        noise_generator = torch.Generator()
        noise_generator.set_state(payload["noise_generator"])
        return cls(
            student=student,
            teacher=teacher,
            optimizer=optimizer,
            cfg=NoiseAwareConfig(**payload["noise_aware"]),
            recipe=recipe,
            seed=payload["seed"],
            order_generator=order_generator,
            noise_generator=noise_generator,
            supervise_all=payload["supervise_all"],
            step=payload["step"],
            epoch=payload["epoch"],
            empty_clean=payload["empty_clean"],
            empty_gate=payload["empty_gate"],
        )


def mpnn_step(
    state: TrainState,
    images: torch.Tensor,
    labels: torch.Tensor,
    clean: torch.Tensor,
    ids: Optional[list[str]] = None,
    dump_dir: Optional[Path] = None,
) -> dict:
    """One optimizer step of the noise-aware objective, then the EMA update.

    The student sees the clean images; the teacher (no gradient) sees M
    Gaussian-perturbed copies, whose mean prediction and entropy drive the
    gated consistency term. ``state`` is advanced in place.

    Returns:
        The step's metrics record
    """
    cfg, t = state.cfg, state.step
    ids = ids or []
    student, teacher = state.student, state.teacher

    student.train()
    probs = forward(student, images)
    supervised = torch.ones_like(clean) if state.supervise_all else clean
    l_cl = clean_loss(probs, labels, supervised)

    lam = lambda_schedule(t, cfg)
    threshold = threshold_schedule(t, cfg)
    gated = torch.zeros(len(images))
    if cfg.max_consistency_weight > 0:
        m, n = cfg.perturbations, images.shape[0]
        with torch.no_grad():
            stack = perturb(images, m, cfg.noise_std, state.noise_generator)
            teacher_probs = forward(teacher, stack.flatten(0, 1)).unflatten(0, (m, n))
            p_t = teacher_mean(teacher_probs)
            uncertainty = entropy_map(teacher_probs)
            gated = gate_mask(uncertainty, threshold, clean).sum(dim=(-2, -1))
        l_no = noisy_loss(probs, p_t, uncertainty, threshold, clean)
    else:
        l_no = torch.zeros_like(l_cl)

    try:
        loss = total_loss(l_cl, l_no, t, cfg).mean()
    except NumericFailureError as e:
        dump = _dump_batch(dump_dir, t, images=images, labels=labels, clean=clean)
        raise NumericFailureError(f"step {t}: {e}", ids, dump) from e

    lr = lr_at(t, state.recipe)
    _set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(teacher, student, cfg.ema_decay)

    clean_counts = supervised.sum(dim=(-2, -1))
    noisy_counts = (~clean.bool()).sum(dim=(-2, -1))
    state.empty_clean += int((clean_counts == 0).sum())
    if cfg.max_consistency_weight > 0:
        state.empty_gate += int(((gated == 0) & (noisy_counts > 0)).sum())
    state.step += 1
    return {
        "step": t,
        "epoch": state.epoch,
        "lr": lr,
        "loss": loss.item(),
        "clean_loss": l_cl.mean().item(),
        "noisy_loss": l_no.mean().item(),
        "lambda": lam,
        "threshold": threshold,
        "gated_pixels": int(gated.sum()),
        "noisy_pixels": int(noisy_counts.sum()),
        "empty_clean": state.empty_clean,
        "empty_gate": state.empty_gate,
    }


def _clean_masks(
    dataset: LabeledDataset, partitions: Mapping[str, object]
) -> torch.Tensor:
    masks = []
    for sample in dataset.samples:
        if sample.id not in partitions:
            raise ConfigError(f"no partition for sample {sample.id}")
        part = partitions[sample.id]
        clean = np.asarray(getattr(part, "clean", part), dtype=bool)
        if clean.shape != sample.label.shape:
            raise ConfigError(f"partition of {sample.id} has shape {clean.shape}")
        masks.append(torch.from_numpy(clean))
    return torch.stack(masks)


def train_mpnn(
    dataset: LabeledDataset,
    partitions: Mapping[str, object],
    recipe: Recipe,
    cfg: NoiseAwareConfig,
    seed: int,
    arch: Union[str, ArchConfig] = "linknet",
    supervise_all: bool = False,
    run_dir: Optional[Union[str, Path]] = None,
    checkpoint_every: int = 0,
    resume_from: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> tuple[LinkNet, LinkNet]:
    """Teacher/student training over ``recipe.epochs`` sweeps.

    Args:
        dataset: Training images with their (noisy) labels
        partitions: Clean masks (or objects with a ``clean`` attribute) per id
        recipe: Optimizer recipe
        cfg: Noise-aware hyper-parameters; ``max_steps`` defaults to the run length
        seed: Fixes initialization, data order and perturbations
        arch: Architecture preset or descriptor
        supervise_all: Cross-entropy on every pixel instead of clean pixels only
        run_dir: Where metrics and checkpoints go (nothing is written if None)
        checkpoint_every: Checkpoint cadence in epochs (0 disables)
        resume_from: Training checkpoint to continue from
        progress: Show a progress bar

    Returns:
        ``(student, teacher)``
    """
    clean_masks = _clean_masks(dataset, partitions)
    if resume_from is not None:
        state = TrainState.load(resume_from, arch)
        logger.info("Resuming from %s at epoch %d step %d", resume_from, state.epoch, state.step)
    else:
        state = TrainState.create(arch, seed, recipe, cfg, len(dataset), supervise_all)

    run_dir = Path(run_dir) if run_dir is not None else None
    log = MetricsLog(run_dir / "metrics.jsonl") if run_dir is not None else None
    ids = dataset.ids
    try:
        epochs = range(state.epoch + 1, state.recipe.epochs + 1)
        for epoch in tqdm(epochs, desc="epochs", disable=not progress):
            state.epoch = epoch
            for indices in epoch_batches(
                len(dataset), state.recipe.batch_size, state.order_generator
            ):
                images, labels = _collate(dataset, indices)
                record = mpnn_step(
                    state,
                    images,
                    labels,
                    clean_masks[indices],
                    [ids[i] for i in indices],
                    dump_dir=run_dir,
                )
                if log is not None:
                    log.write(record)
            if run_dir is not None and checkpoint_every and epoch % checkpoint_every == 0:
                state.save(run_dir / "checkpoints" / f"epoch_{epoch:04d}.pt")
    finally:
        if log is not None:
            log.close()

    if run_dir is not None:
        state.save(run_dir / "final.pt")
    if state.empty_clean or state.empty_gate:
        logger.warning(
            "Degenerate batches: %d images without clean pixels, %d with an empty gate",
            state.empty_clean,
            state.empty_gate,
        )
    return state.student, state.teacher
