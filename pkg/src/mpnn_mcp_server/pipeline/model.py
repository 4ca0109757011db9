# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Descriptor-driven LinkNet-style encoder/decoder.

Every network in the pipeline (the MPGGD ensemble members, the student and
the teacher) is an instance of :class:`LinkNet` built from an
:class:`ArchConfig`, so parameter sets of one descriptor are interchangeable.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture descriptor.

    Args:
        name: Preset name, informational
        in_channels: Input image channels
        num_classes: Output classes (background, disc, cup)
        stem_channels: Width of the full-resolution stem
        encoder_channels: Width of each encoder level; each level halves H and W
        blocks_per_level: Residual blocks per encoder level
    """

    name: str = "linknet"
    in_channels: int = 3
    num_classes: int = 3
    stem_channels: int = 64
    encoder_channels: tuple[int, ...] = field(default=(64, 128, 256, 512))
    blocks_per_level: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        widths = (self.in_channels, self.num_classes, self.stem_channels)
        if min(widths) < 1 or not self.encoder_channels:
            raise ConfigError(f"invalid architecture descriptor: {self}")
        if min(self.encoder_channels) < 1 or self.blocks_per_level < 1:
            raise ConfigError(f"invalid architecture descriptor: {self}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.encoder_channels)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["encoder_channels"] = list(self.encoder_channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid architecture descriptor: {e}") from e


ARCH_PRESETS = {
    "linknet": ArchConfig(),
    # CPU-sized variant for 64×64 synthetic runs
    "tiny": ArchConfig(
        name="tiny", stem_channels=8, encoder_channels=(8, 16, 32), blocks_per_level=1
    ),
    # smallest useful network, accepts 4×4 inputs
    "micro": ArchConfig(
        name="micro", stem_channels=4, encoder_channels=(4, 8), blocks_per_level=1
    ),
}


def get_arch(arch: Union[str, ArchConfig, dict]) -> ArchConfig:
    if isinstance(arch, ArchConfig):
        return arch
    if isinstance(arch, dict):
        return ArchConfig.from_dict(arch)
    try:
        return ARCH_PRESETS[arch]
    except KeyError:
        raise ConfigError(
            f"unknown architecture preset {arch!r}; choose from {sorted(ARCH_PRESETS)}"
        ) from None


def _conv_bn_relu(cin: int, cout: int, kernel: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    """ResNet basic block; ``stride=2`` halves the resolution."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class DecoderBlock(nn.Module):
    """LinkNet decoder: 1×1 reduce, ×2 transposed conv, 1×1 expand."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = max(cin // 4, 1)
        self.reduce = _conv_bn_relu(cin, mid, 1)
        self.upsample = nn.Sequential(
            nn.ConvTranspose2d(
                mid, mid, 3, stride=2, padding=1, output_padding=1, bias=False
            ),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
        )
        self.expand = _conv_bn_relu(mid, cout, 1)

    def forward(self, x):
        return self.expand(self.upsample(self.reduce(x)))


class LinkNet(nn.Module):
    """Encoder/decoder with additive skips, returning per-pixel class logits."""

    def __init__(self, arch: ArchConfig, seed: Optional[int] = None):
        super().__init__()
        self.arch = arch
        self.seed = seed
        self.stem = _conv_bn_relu(arch.in_channels, arch.stem_channels, 3)

        encoders = []
        cin = arch.stem_channels
        for cout in arch.encoder_channels:
            blocks = [ResidualBlock(cin, cout, stride=2)]
            blocks += [
                ResidualBlock(cout, cout) for _ in range(arch.blocks_per_level - 1)
            ]
            encoders.append(nn.Sequential(*blocks))
            cin = cout
        self.encoders = nn.ModuleList(encoders)

        skip_widths = (arch.stem_channels,) + arch.encoder_channels[:-1]
        self.decoders = nn.ModuleList(
            DecoderBlock(cout, skip)
            for cout, skip in zip(arch.encoder_channels, skip_widths)
        )
        self.head = _conv_bn_relu(arch.stem_channels, arch.stem_channels, 3)
        self.classifier = nn.Conv2d(arch.stem_channels, arch.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = [self.stem(x)]
        for encoder in self.encoders:
            skips.append(encoder(skips[-1]))
        out = skips.pop()
        for decoder in reversed(self.decoders):
            out = decoder(out) + skips.pop()
        return self.classifier(self.head(out))


def init_network(arch_config: Union[str, ArchConfig], seed: int) -> LinkNet:
    """Build a network whose weights depend only on ``seed``.

    The global torch RNG is left untouched.
    """
    arch = get_arch(arch_config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = LinkNet(arch, seed=seed)
    return net


def check_input(net: LinkNet, images: torch.Tensor) -> None:
    arch = net.arch
    if images.ndim != 4 or images.shape[1] != arch.in_channels:
        raise ShapeMismatchError(
            f"expected N×{arch.in_channels}×H×W input, got {tuple(images.shape)}"
        )
    factor = arch.downsample_factor
    h, w = images.shape[-2:]
    if h % factor or w % factor:
        raise ShapeMismatchError(
            f"spatial size {h}×{w} must be divisible by {factor} for {arch.name}"
        )


def forward(net: LinkNet, images: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities, N×C×H×W, each pixel on the simplex."""
    check_input(net, images)
    return torch.softmax(net(images), dim=1)


def decode_mask(probs: torch.Tensor) -> torch.Tensor:
    """Arg-max over the class axis (``-3``); ties resolve to the lower class."""
    return probs.argmax(dim=-3)


@torch.inference_mode()
def predict_mask(
    net: LinkNet, images: torch.Tensor, batch_size: int = 16
) -> np.ndarray:
    """Decode label masks in inference mode.

    Args:
        net: Network to run; its train/eval mode is restored afterwards
        images: N×3×H×W batch, or a single 3×H×W image
        batch_size: Forward chunk size

    Returns:
        uint8 masks, N×H×W (or H×W for a single image)
    """
    single = images.ndim == 3
    if single:
        images = images.unsqueeze(0)
    was_training = net.training
    net.eval()
    try:
        masks = [
            decode_mask(forward(net, chunk))
            for chunk in torch.split(images, batch_size)
        ]
    finally:
        net.train(was_training)
    out = torch.cat(masks).to(torch.uint8).cpu().numpy()
    return out[0] if single else out


def check_compatible(a: nn.Module, b: nn.Module) -> None:
    """Raise unless ``a`` and ``b`` carry the same named tensors and shapes."""
    sa, sb = a.state_dict(), b.state_dict()
    if sa.keys() != sb.keys():
        raise ShapeMismatchError("parameter sets have different tensor names")
    for name, tensor in sa.items():
        if tensor.shape != sb[name].shape:
            raise ShapeMismatchError(
                f"{name}: shape {tuple(tensor.shape)} vs {tuple(sb[name].shape)}"
            )


# ==============================
# Checkpoints
# ==============================


def save_network(
    path: Union[str, Path],
    net: LinkNet,
    step: int = 0,
    extra: Optional[dict[str, Any]] = None,
) -> None:
    """Named-tensor archive plus descriptor, seed and step."""
    payload = {
        "arch": net.arch.to_dict(),
        "seed": net.seed,
        "step": step,
        "state_dict": net.state_dict(),
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def network_from_state(
    arch: Union[dict, ArchConfig], state_dict: dict, seed: Optional[int] = None
) -> LinkNet:
    net = LinkNet(get_arch(arch), seed=seed)
    try:
        net.load_state_dict(state_dict)
    except RuntimeError as e:
        raise ConfigError(f"checkpoint does not match architecture: {e}") from e
    return net


def load_network(
    path: Union[str, Path],
    arch: Optional[Union[str, ArchConfig]] = None,
    key: Optional[str] = None,
) -> tuple[LinkNet, dict]:
    """Load a network saved by :func:`save_network` or a training checkpoint.

    Args:
        path: Checkpoint file
        arch: Expected descriptor; a mismatch raises ``ConfigError``
        key: Which state dict to load. None picks the teacher of a training
            checkpoint and the only network of a plain one.

    Returns:
        ``(network, checkpoint payload)``
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    saved = ArchConfig.from_dict(payload["arch"])
    if arch is not None and get_arch(arch) != saved:
        raise ConfigError(
            f"checkpoint architecture {saved.name} does not match configured "
            f"{get_arch(arch).name}"
        )
    if key is None:
        key = "teacher" if "teacher" in payload else "state_dict"
    elif key == "student" and "student" not in payload:
        # plain networks are trained directly, so they are their own student
        key = "state_dict"
    if key not in payload:
        raise ConfigError(f"checkpoint {path} has no '{key}' weights")
    net = network_from_state(saved, payload[key], payload.get("seed"))
    return net, payload
