# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Multiple pseudo-label generation and the clean/noisy pixel partition.

K networks that differ only in seed are trained on the noisy labels until
their mean disc/cup Dice on the training set reaches φ. Their predictions
are the pseudo-labels; a pixel is clean exactly when all K agree.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from ..errors import ConfigError, DatasetError, ShapeMismatchError, ThresholdNotReachedError
from .datasets import CUP, DISC, LabeledDataset, read_mask, validate_mask, write_mask
from .evaluate import dice, predict_dataset
from .model import ArchConfig, LinkNet, init_network
from .trainer import Recipe, train_supervised

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def dsc_m(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean of the disc and cup Dice coefficients, in [0, 1]."""
    return (dice(pred, truth, DISC) + dice(pred, truth, CUP)) / 2


def mean_dsc_m(predictions: np.ndarray, dataset: LabeledDataset) -> float:
    scores = [dsc_m(p, s.label) for p, s in zip(predictions, dataset.samples)]
    return float(np.mean(scores))


@dataclass(frozen=True)
class MemberResult:
    """Where one ensemble member stopped."""

    seed: int
    epoch: int
    dsc_m: float
    history: tuple[float, ...] = field(default=())


@dataclass(frozen=True)
class PseudoLabelSet:
    """K pseudo-label masks per training image, stored as K×H×W uint8 stacks."""

    masks: Mapping[str, np.ndarray]
    k: int
    phi: float
    seeds: tuple[int, ...]
    members: tuple[MemberResult, ...] = field(default=())

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"K must be >= 2, got {self.k}")
        if len(self.seeds) != self.k:
            raise ConfigError(f"expected {self.k} seeds, got {len(self.seeds)}")
        for image_id, stack in self.masks.items():
            stack = np.asarray(stack)
            if stack.ndim != 3 or stack.shape[0] != self.k:
                raise ShapeMismatchError(
                    f"{image_id}: expected {self.k}×H×W pseudo-labels, got {stack.shape}"
                )

    @property
    def ids(self) -> list[str]:
        return sorted(self.masks)

    def manifest(self) -> dict:
        return {
            "k": self.k,
            "phi": self.phi,
            "seeds": list(self.seeds),
            "members": [asdict(m) for m in self.members],
            "ids": self.ids,
        }

    def save(self, directory: Union[str, Path]) -> Path:
        """Write ``<id>_k<k>.png`` (k = 1..K) plus the manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for image_id in self.ids:
            for k, mask in enumerate(self.masks[image_id], start=1):
                write_mask(directory / f"{image_id}_k{k}.png", mask)
        (directory / MANIFEST).write_text(json.dumps(self.manifest(), indent=2))
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "PseudoLabelSet":
        directory = Path(directory)
        manifest_path = directory / MANIFEST
        if not manifest_path.exists():
            raise ConfigError(f"no pseudo-label store at {directory}")
        manifest = json.loads(manifest_path.read_text())
        k = manifest["k"]
        masks = {}
        for image_id in manifest["ids"]:
            paths = [directory / f"{image_id}_k{i}.png" for i in range(1, k + 1)]
            missing = [p.name for p in paths if not p.exists()]
            if missing:
                raise DatasetError(f"pseudo-label store is missing {missing[0]}")
            masks[image_id] = np.stack([read_mask(p) for p in paths])
        members = tuple(
            MemberResult(m["seed"], m["epoch"], m["dsc_m"], tuple(m["history"]))
            for m in manifest.get("members", [])
        )
        return cls(masks, k, manifest["phi"], tuple(manifest["seeds"]), members)


@dataclass(frozen=True)
class PixelPartition:
    """Boolean clean-pixel mask of one image; ``~clean`` is the noisy set."""

    clean: np.ndarray

    def __post_init__(self):
        clean = np.asarray(self.clean)
        if clean.ndim != 2:
            raise ShapeMismatchError(f"partition must be H×W, got {clean.shape}")
        object.__setattr__(self, "clean", clean.astype(bool, copy=False))

    @property
    def s_cl(self) -> int:
        return int(self.clean.sum())

    @property
    def s_no(self) -> int:
        return int(self.clean.size - self.clean.sum())


# ==============================
# Ensemble
# ==============================


def train_to_threshold(
    dataset: LabeledDataset,
    seed: int,
    phi: float,
    max_epochs: int,
    recipe: Optional[Recipe] = None,
    arch: Union[str, ArchConfig] = "linknet",
    progress: bool = False,
) -> tuple[LinkNet, MemberResult]:
    """Train one member until the training-set DSC_m reaches ``phi``.

    The check runs after every epoch with the current weights.

    Returns:
        The weights at the first passing epoch and the stopping record

    Raises:
        ThresholdNotReachedError: ``phi`` was not reached within ``max_epochs``
    """
    if not 0.0 <= phi < 1.0:
        raise ConfigError(f"phi must be in [0, 1), got {phi}")
    recipe = recipe or Recipe()
    net = init_network(arch, seed)
    history: list[float] = []

    def reached(epoch: int, current: LinkNet) -> bool:
        score = mean_dsc_m(predict_dataset(current, dataset), dataset)
        history.append(score)
        logger.debug("member seed=%d epoch %d DSC_m %.4f", seed, epoch, score)
        return score >= phi

    train_supervised(
        net, dataset, recipe, seed, on_epoch_end=reached, epochs=max_epochs, progress=progress
    )
    if not history or history[-1] < phi:
        raise ThresholdNotReachedError(seed, phi, max(history, default=0.0), max_epochs)
    logger.info(
        "member seed=%d reached DSC_m %.4f >= %.2f at epoch %d",
        seed,
        history[-1],
        phi,
        len(history),
    )
    return net, MemberResult(seed, len(history), history[-1], tuple(history))


def generate_pseudo_labels(
    dataset: LabeledDataset,
    k: int,
    phi: float,
    base_seed: int,
    max_epochs: int = 100,
    recipe: Optional[Recipe] = None,
    arch: Union[str, ArchConfig] = "linknet",
    progress: bool = False,
) -> PseudoLabelSet:
    """Train K members (seeds ``base_seed .. base_seed+K-1``) and predict with each.

    Pseudo-labels come from the unperturbed preprocessed images. Any member
    missing the threshold fails the whole ensemble.
    """
    if k < 2:
        raise ConfigError(f"K must be >= 2, got {k}")
    seeds = tuple(base_seed + i for i in range(k))
    predictions, members = [], []
    for seed in tqdm(seeds, desc="ensemble members", disable=not progress):
        net, result = train_to_threshold(dataset, seed, phi, max_epochs, recipe, arch)
        predictions.append(predict_dataset(net, dataset))
        members.append(result)
    stacked = np.stack(predictions, axis=1)
    masks = {sample_id: stacked[i] for i, sample_id in enumerate(dataset.ids)}
    return PseudoLabelSet(masks, k, phi, seeds, tuple(members))


# ==============================
# Partition
# ==============================


def consensus(stack: np.ndarray) -> np.ndarray:
    """True where every mask of a K×H×W stack carries the same label."""
    stack = np.asarray(stack)
    return (stack == stack[0]).all(axis=0)


def partition(pseudo: PseudoLabelSet, image_id: str) -> PixelPartition:
    try:
        stack = pseudo.masks[image_id]
    except KeyError:
        raise DatasetError(f"no pseudo-labels for {image_id}") from None
    return PixelPartition(consensus(stack))


def partition_all(pseudo: PseudoLabelSet) -> dict[str, PixelPartition]:
    return {image_id: partition(pseudo, image_id) for image_id in pseudo.ids}


def partition_totals(partitions: Mapping[str, PixelPartition]) -> dict:
    return {
        "s_cl": sum(p.s_cl for p in partitions.values()),
        "s_no": sum(p.s_no for p in partitions.values()),
        "pixels": sum(p.clean.size for p in partitions.values()),
        "images": len(partitions),
    }


def save_partitions(
    directory: Union[str, Path],
    partitions: Mapping[str, PixelPartition],
    pseudo: PseudoLabelSet,
    extra: Optional[dict] = None,
) -> dict:
    """Write ``<id>.png`` (0 noisy, 1 clean) and a manifest; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image_id, part in sorted(partitions.items()):
        write_mask(directory / f"{image_id}.png", part.clean.astype(np.uint8))
    manifest = {
        "k": pseudo.k,
        "phi": pseudo.phi,
        "seeds": list(pseudo.seeds),
        **partition_totals(partitions),
        "noisy_pixels": {i: p.s_no for i, p in sorted(partitions.items())},
    }
    if extra:
        manifest.update(extra)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return manifest


def load_partitions(directory: Union[str, Path]) -> dict[str, PixelPartition]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise ConfigError(f"no partition store at {directory}")
    manifest = json.loads(manifest_path.read_text())
    partitions = {}
    for image_id in manifest["noisy_pixels"]:
        path = directory / f"{image_id}.png"
        if not path.exists():
            raise DatasetError(f"partition store is missing {path.name}")
        partitions[image_id] = PixelPartition(read_mask(path) == 1)
    return partitions


def boundary_band(label: np.ndarray, radius: int = 2) -> np.ndarray:
    """Pixels within ``radius`` of a class boundary of ``label``."""
    label = validate_mask(label)
    edges = ndimage.morphological_gradient(label, size=3) > 0
    if not edges.any():
        return np.zeros(label.shape, dtype=bool)
    return ndimage.distance_transform_edt(~edges) <= radius


def boundary_concentration(
    partitions: Mapping[str, PixelPartition],
    labels: Mapping[str, np.ndarray],
    radius: int = 2,
) -> dict:
    """Noisy-pixel rate inside the band around label boundaries vs. elsewhere."""
    near_noisy = near_total = far_noisy = far_total = 0
    for image_id, part in partitions.items():
        band = boundary_band(labels[image_id], radius)
        if band.shape != part.clean.shape:
            raise ShapeMismatchError(f"{image_id}: label and partition shapes differ")
        noisy = ~part.clean
        near_noisy += int((noisy & band).sum())
        near_total += int(band.sum())
        far_noisy += int((noisy & ~band).sum())
        far_total += int((~band).sum())
    return {
        "radius": radius,
        "near_boundary_rate": near_noisy / near_total if near_total else 0.0,
        "elsewhere_rate": far_noisy / far_total if far_total else 0.0,
        "near_boundary_noisy": near_noisy,
        "elsewhere_noisy": far_noisy,
    }


def render_noisy_overlay(
    image: np.ndarray, part: PixelPartition, color: Sequence[int] = (255, 0, 0)
) -> np.ndarray:
    """Blend ``color`` over the noisy pixels of an H×W×3 uint8 image."""
    image = np.asarray(image, dtype=np.uint8)
    if image.shape[:2] != part.clean.shape:
        raise ShapeMismatchError("overlay image and partition shapes differ")
    out = image.astype(np.float32)
    noisy = ~part.clean
    out[noisy] = 0.4 * out[noisy] + 0.6 * np.asarray(color, dtype=np.float32)
    return np.round(out).astype(np.uint8)
