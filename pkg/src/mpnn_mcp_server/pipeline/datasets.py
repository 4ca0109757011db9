# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""RIGA-format loading, multi-rater fusion, preprocessing and a synthetic stand-in.

On disk a dataset root holds one directory per source::

    <root>/<source>/<stem>_image.<raster>
    <root>/<source>/<stem>_rater<k>.<raster>
    <root>/<source>/<stem>_clean.<raster>      (synthetic data only)

Masks are single-channel lossless rasters with pixel values 0 (background),
1 (optic disc) and 2 (optic cup). Sample ids are ``<source>_<stem>``.
"""

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch.utils.data import Dataset

from ..errors import DatasetError, ShapeMismatchError

logger = logging.getLogger(__name__)

BACKGROUND, DISC, CUP = 0, 1, 2
LABEL_VALUES = (BACKGROUND, DISC, CUP)
NUM_CLASSES = len(LABEL_VALUES)

MASK_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")
IMAGE_SUFFIXES = MASK_SUFFIXES + (".jpg", ".jpeg")

RaterSelector = Union[int, Literal["majority", "clean"]]


def parse_rater(value: Union[str, int]) -> RaterSelector:
    """Normalize a rater selector: ``1``, ``"rater1"``, ``"majority-vote"``, ``"clean"``."""
    if isinstance(value, int) and not isinstance(value, bool):
        if value < 1:
            raise DatasetError(f"rater index must be >= 1, got {value}")
        return value
    text = str(value).strip().lower()
    if text in ("majority", "majority-vote", "majority_vote"):
        return "majority"
    if text == "clean":
        return "clean"
    match = re.fullmatch(r"(?:rater)?(\d+)", text)
    if match and int(match.group(1)) >= 1:
        return int(match.group(1))
    raise DatasetError(f"unknown rater selector: {value!r}")


def validate_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    """Return ``mask`` as a uint8 H×W array, rejecting values outside {0,1,2}."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DatasetError(f"{name}: expected a 2-D label mask, got shape {mask.shape}")
    bad = np.setdiff1d(np.unique(mask), LABEL_VALUES)
    if bad.size:
        raise DatasetError(
            f"{name}: label values {bad.tolist()} outside {list(LABEL_VALUES)}"
        )
    return mask.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class ImageSample:
    """One image with its label mask.

    ``image`` is an H×W×3 float32 array of normalized intensities and
    ``label`` an H×W uint8 mask over {0,1,2}.
    """

    image: np.ndarray
    label: np.ndarray
    id: str

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be H×W×3, got {image.shape}")
        if not np.isfinite(image).all():
            raise DatasetError(f"{self.id}: image contains non-finite values")
        label = validate_mask(self.label, self.id)
        if label.shape != image.shape[:2]:
            raise ShapeMismatchError(
                f"{self.id}: image {image.shape[:2]} and label {label.shape} differ"
            )
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "label", label)


class LabeledDataset(Dataset):
    """Ordered collection of :class:`ImageSample` usable as a torch dataset.

    Items are ``(image C×H×W float32, label H×W int64, index)``.
    """

    def __init__(self, samples: Sequence[ImageSample]):
        samples = list(samples)
        if not samples:
            raise DatasetError("no samples found")
        ids = [s.id for s in samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate sample ids: {dupes}")
        self.samples = samples
        self._index = {sample_id: i for i, sample_id in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int):
        sample = self.samples[index]
        image = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))
        label = torch.from_numpy(sample.label.astype(np.int64))
        return image, label, index

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self, sample_id: str) -> ImageSample:
        try:
            return self.samples[self._index[sample_id]]
        except KeyError:
            raise DatasetError(f"unknown sample id: {sample_id}") from None

    def with_labels(self, labels: Mapping[str, np.ndarray]) -> "LabeledDataset":
        """Same images, labels replaced by ``labels[id]``."""
        missing = [i for i in self.ids if i not in labels]
        if missing:
            raise DatasetError(f"missing mask for {missing[0]}")
        return LabeledDataset(
            [ImageSample(s.image, labels[s.id], s.id) for s in self.samples]
        )

    def standardized(self, stats: "ChannelStats") -> "LabeledDataset":
        return LabeledDataset(
            [ImageSample(stats.apply(s.image), s.label, s.id) for s in self.samples]
        )

    def images(self, indices: Optional[Sequence[int]] = None) -> torch.Tensor:
        """Stack images (all samples, or ``indices``) into an N×3×H×W tensor."""
        chosen = range(len(self)) if indices is None else indices
        return torch.stack([self[i][0] for i in chosen])


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std of the training split, in [0, 1] intensity units."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise DatasetError("channel statistics need exactly three channels")
        for channel, value in enumerate(self.std):
            if not value > 0 or not math.isfinite(value):
                raise DatasetError(
                    f"channel {channel} has zero variance; cannot standardize"
                )

    @classmethod
    def from_images(cls, images: Iterable[np.ndarray]) -> "ChannelStats":
        # Chan et al. pairwise merge of per-image moments
        count = 0
        mean = np.zeros(3)
        m2 = np.zeros(3)
        low = np.full(3, np.inf)
        high = np.full(3, -np.inf)
        for image in images:
            pixels = np.asarray(image, dtype=np.float64).reshape(-1, 3)
            n = pixels.shape[0]
            if n == 0:
                continue
            image_mean = pixels.mean(axis=0)
            image_m2 = np.square(pixels - image_mean).sum(axis=0)
            delta = image_mean - mean
            total = count + n
            mean = mean + delta * n / total
            m2 = m2 + image_m2 + np.square(delta) * count * n / total
            count = total
            low = np.minimum(low, pixels.min(axis=0))
            high = np.maximum(high, pixels.max(axis=0))
        if count == 0:
            raise DatasetError("no samples found")
        std = np.sqrt(m2 / count)
        std[high == low] = 0.0
        return cls(tuple(mean.tolist()), tuple(std.tolist()))

    def apply(self, image: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean)
        std = np.asarray(self.std)
        out = ((np.asarray(image, dtype=np.float64) - mean) / std).astype(np.float32)
        if not np.isfinite(out).all():
            raise DatasetError("standardized image contains non-finite values")
        return out

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ChannelStats":
        data = json.loads(Path(path).read_text())
        return cls(tuple(data["mean"]), tuple(data["std"]))


def resize_image(raw_image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of a byte image to ``target``×``target``, scaled to [0, 1]."""
    raw = np.asarray(raw_image)
    if raw.size == 0:
        raise DatasetError("raw image is empty")
    if raw.dtype != np.uint8 or raw.ndim != 3 or raw.shape[2] != 3:
        raise DatasetError(
            f"expected an H×W×3 uint8 image, got {raw.dtype} {raw.shape}"
        )
    if raw.shape[:2] != (target, target):
        raw = np.asarray(
            Image.fromarray(raw).resize((target, target), Image.Resampling.BILINEAR)
        )
    return raw.astype(np.float32) / 255.0


def preprocess(
    raw_image: np.ndarray, target: int, stats: Optional[ChannelStats] = None
) -> np.ndarray:
    """Resize to ``target``×``target`` and standardize each channel.

    ``stats`` are the frozen training-split statistics; without them the
    image's own statistics are used.
    """
    scaled = resize_image(raw_image, target)
    if stats is None:
        stats = ChannelStats.from_images([scaled])
    return stats.apply(scaled)


def resize_mask(mask: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resize, so the label alphabet is preserved."""
    mask = validate_mask(mask)
    if mask.shape == (target, target):
        return mask.copy()
    resized = Image.fromarray(mask).resize(
        (target, target), Image.Resampling.NEAREST
    )
    return np.asarray(resized, dtype=np.uint8)


def majority_vote(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel plurality over rater masks; ties go to the lower class index."""
    if len(masks) == 0:
        raise DatasetError("majority vote needs at least one mask")
    masks = [validate_mask(m, f"rater mask {i}") for i, m in enumerate(masks)]
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"rater masks differ in shape: {sorted(shapes)}")
    stack = np.stack(masks)
    counts = np.stack([(stack == c).sum(axis=0) for c in LABEL_VALUES])
    # argmax returns the first maximum, i.e. the lowest class on ties
    return counts.argmax(axis=0).astype(np.uint8)


# ==============================
# Raster IO
# ==============================


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "I", "I;16"):
            img = img.convert("L")
        return validate_mask(np.asarray(img), str(path))


def write_image(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(validate_mask(mask, str(path))).save(path)


def _find_raster(directory: Path, stem: str, suffixes: Sequence[str]) -> Optional[Path]:
    for suffix in suffixes:
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def _rater_masks(directory: Path, stem: str) -> list[Path]:
    pattern = re.compile(re.escape(stem) + r"_rater(\d+)\.\w+$")
    found = []
    for path in directory.iterdir():
        match = pattern.match(path.name)
        if match and path.suffix.lower() in MASK_SUFFIXES:
            found.append((int(match.group(1)), path))
    return [path for _, path in sorted(found)]


def _load_mask(directory: Path, stem: str, sample_id: str, rater: RaterSelector) -> np.ndarray:
    if rater == "majority":
        paths = _rater_masks(directory, stem)
        if not paths:
            raise DatasetError(f"missing mask for {sample_id}: no rater masks")
        return majority_vote([read_mask(p) for p in paths])
    suffix = "_clean" if rater == "clean" else f"_rater{rater}"
    path = _find_raster(directory, stem + suffix, MASK_SUFFIXES)
    if path is None:
        raise DatasetError(f"missing mask for {sample_id} ({stem}{suffix})")
    return read_mask(path)


def load_riga_split(
    root_path: Union[str, Path],
    rater: Union[RaterSelector, str] = 1,
    sources: Optional[Sequence[str]] = None,
    side: int = 256,
    stats: Optional[ChannelStats] = None,
) -> tuple[LabeledDataset, ChannelStats]:
    """Load every sample under ``root_path`` (optionally only ``sources``).

    Images are resized to ``side``×``side`` and standardized with ``stats``;
    when ``stats`` is None they are computed over the loaded split, which is
    how the training split's statistics get frozen.

    Returns:
        The dataset, ordered by id, and the statistics that were applied.
    """
    root = Path(root_path)
    rater = parse_rater(rater)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")

    source_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if sources is not None:
        known = {d.name: d for d in source_dirs}
        missing = [s for s in sources if s not in known]
        if missing:
            raise DatasetError(f"unknown source(s) under {root}: {missing}")
        source_dirs = [known[s] for s in sources]

    entries = []
    for source_dir in source_dirs:
        for image_path in sorted(source_dir.glob("*_image.*")):
            if image_path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            stem = image_path.name[: -len("_image" + image_path.suffix)]
            sample_id = f"{source_dir.name}_{stem}"
            mask = _load_mask(source_dir, stem, sample_id, rater)
            entries.append((sample_id, image_path, mask))

    if not entries:
        raise DatasetError(f"no samples found under {root}")
    entries.sort(key=lambda entry: entry[0])

    scaled = [resize_image(read_image(path), side) for _, path, _ in entries]
    if stats is None:
        stats = ChannelStats.from_images(scaled)
    samples = [
        ImageSample(stats.apply(image), resize_mask(mask, side), sample_id)
        for (sample_id, _, mask), image in zip(entries, scaled)
    ]
    logger.info(
        "Loaded %d samples from %s (rater=%s, side=%d)", len(samples), root, rater, side
    )
    return LabeledDataset(samples), stats


# ==============================
# Synthetic fundus-like data
# ==============================

# relative radial amplitude of the boundary perturbation at boundary_noise=1
NOISE_AMPLITUDE = 0.25
_HARMONICS = 4


def _smooth_boundary_field(rng: np.random.Generator, angle: np.ndarray) -> np.ndarray:
    """Random periodic function of the polar angle with values in [-1, 1]."""
    k = np.arange(1, _HARMONICS + 1)
    coef = rng.normal(size=_HARMONICS) / k
    phase = rng.uniform(0.0, 2 * np.pi, size=_HARMONICS)
    field = np.zeros_like(angle)
    for kk, c, p in zip(k, coef, phase):
        field += c * np.cos(kk * angle + p)
    return field / np.abs(coef).sum()


def _labels(disc: np.ndarray, cup: np.ndarray) -> np.ndarray:
    mask = np.zeros(disc.shape, dtype=np.uint8)
    mask[disc] = DISC
    mask[cup] = CUP
    return mask


def _render_synthetic(
    rng: np.random.Generator,
    side: int,
    boundary_noise: float,
    boundary_bias: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one image with its exact and boundary-perturbed masks.

    ``boundary_bias`` moves that share of the disc perturbation from the
    zero-mean random field to a consistent outward over-trace of the rim,
    the way a rater who always draws slightly wide would.
    """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    cx, cy = side / 2 + rng.uniform(-0.08, 0.08, size=2) * side
    a = rng.uniform(0.20, 0.28) * side
    b = a * rng.uniform(0.85, 1.15)
    theta = rng.uniform(0.0, np.pi)
    cup_ratio = rng.uniform(0.45, 0.70)

    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    rho = np.hypot(u / a, v / b)
    angle = np.arctan2(v / b, u / a)

    # drawn unconditionally so images do not depend on boundary_noise
    disc_field = _smooth_boundary_field(rng, angle)
    cup_field = _smooth_boundary_field(rng, angle)

    texture = ndimage.gaussian_filter(rng.normal(size=(side, side)), sigma=side / 16)
    texture /= np.abs(texture).max() + 1e-12
    radius = np.hypot(xx - side / 2, yy - side / 2) / (side / np.sqrt(2))
    background = np.array([0.55, 0.25, 0.12]) * rng.uniform(0.85, 1.15)
    image = np.empty((side, side, 3))
    image[:] = background
    image *= (1.0 - 0.35 * radius**2)[..., None]
    image += 0.05 * texture[..., None]

    edge = 1.5 / a  # soft edge of ~1.5 px in normalized radius units
    disc_soft = 1.0 / (1.0 + np.exp(-(1.0 - rho) / edge))
    cup_soft = 1.0 / (1.0 + np.exp(-(cup_ratio - rho) / edge))
    shading = (1.0 - 0.2 * np.clip(rho, 0.0, 1.0))[..., None]
    image += np.array([0.35, 0.38, 0.25]) * disc_soft[..., None] * shading
    image += np.array([0.10, 0.18, 0.25]) * cup_soft[..., None]
    image += rng.normal(scale=0.01, size=image.shape)
    over = rng.uniform(0.5, 1.5)

    amplitude = NOISE_AMPLITUDE * boundary_noise
    random_share = 1.0 - boundary_bias
    clean = _labels(rho <= 1.0, rho <= cup_ratio)
    noisy = _labels(
        rho <= 1.0 + amplitude * (random_share * disc_field + boundary_bias * over),
        rho <= cup_ratio * (1.0 + amplitude * random_share * cup_field),
    )

    image_u8 = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return image_u8, clean, noisy


def synth_generate(
    seed: int,
    count: int,
    side: int,
    boundary_noise: float,
    boundary_bias: float = 0.0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Generate concentric-ellipse disc/cup images with noisy and exact masks.

    Images are returned in [0, 1] intensity units (``uint8 / 255``). Each
    sample draws from its own child seed, so generation is order-free.

    Returns:
        ``(noisy, clean)`` datasets sharing the same images and ids.
    """
    if count <= 0:
        raise DatasetError(f"count must be positive, got {count}")
    if side < 32:
        raise DatasetError(f"side must be >= 32, got {side}")
    if not 0.0 <= boundary_noise <= 1.0:
        raise DatasetError(f"boundary_noise must be in [0, 1], got {boundary_noise}")
    if not 0.0 <= boundary_bias <= 1.0:
        raise DatasetError(f"boundary_bias must be in [0, 1], got {boundary_bias}")

    children = np.random.SeedSequence(seed).spawn(count)
    noisy_samples, clean_samples = [], []
    for i, child in enumerate(children):
        image_u8, clean, noisy = _render_synthetic(
            np.random.default_rng(child), side, boundary_noise, boundary_bias
        )
        image = image_u8.astype(np.float32) / 255.0
        sample_id = f"synth{i:05d}"
        noisy_samples.append(ImageSample(image, noisy, sample_id))
        clean_samples.append(ImageSample(image, clean, sample_id))
    return LabeledDataset(noisy_samples), LabeledDataset(clean_samples)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Inverse of the ``uint8 / 255`` scaling used by synthetic images."""
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def write_riga_layout(
    directory: Union[str, Path],
    noisy: LabeledDataset,
    clean: Optional[LabeledDataset] = None,
) -> list[str]:
    """Write ``noisy`` as rater-1 masks (and ``clean`` as ``_clean`` masks).

    Returns:
        The file stems written, in dataset order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stems = []
    for sample in noisy.samples:
        write_image(directory / f"{sample.id}_image.png", to_uint8(sample.image))
        write_mask(directory / f"{sample.id}_rater1.png", sample.label)
        if clean is not None:
            write_mask(directory / f"{sample.id}_clean.png", clean.by_id(sample.id).label)
        stems.append(sample.id)
    return stems
