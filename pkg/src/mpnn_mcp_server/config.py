# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Layered run configuration.

A run is described by a YAML document. Layers are applied in order:

1. files named by a top-level ``include:`` (relative to the including file)
2. the document itself, deep-merged on top
3. ``MPNN_OUTPUT_DIR`` / ``MPNN_SEED`` from the environment
4. ``--set dotted.key=value`` overrides (values parsed as YAML scalars)
"""

import dataclasses
import hashlib
import os
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Mapping, Optional, Sequence, Union, get_args, get_origin, get_type_hints

import yaml

from .errors import ConfigError, DatasetError
from .pipeline.datasets import parse_rater
from .pipeline.evaluate import EVAL_TARGETS
from .pipeline.model import ARCH_PRESETS
from .pipeline.noise_aware import NoiseAwareConfig
from .pipeline.trainer import Recipe

ENV_OUTPUT_DIR = "MPNN_OUTPUT_DIR"
ENV_SEED = "MPNN_SEED"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    train_count: int = 200
    test_count: int = 50
    side: int = 64
    boundary_noise: float = 0.3
    boundary_bias: float = 0.0


@dataclass(frozen=True)
class DatasetConfig:
    """Where the images come from and which labels train the networks.

    ``root`` defaults to ``<output_dir>/data`` for synthetic data.
    """

    kind: Literal["synthetic", "riga"] = "riga"
    root: Optional[str] = None
    train_sources: Optional[tuple[str, ...]] = ("BinRushed", "MESSIDOR")
    test_sources: Optional[tuple[str, ...]] = ("Magrabia",)
    rater: Union[int, str] = 1
    side: int = 256
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        try:
            parse_rater(self.rater)
        except DatasetError as e:
            raise ConfigError(str(e)) from e
        if self.side < 1:
            raise ConfigError("dataset.side must be positive")


@dataclass(frozen=True)
class MpggdConfig:
    k: int = 5
    phi: float = 0.93
    max_epochs: int = 100
    base_seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("mpggd.k must be >= 2")
        if not 0.0 <= self.phi < 1.0:
            raise ConfigError("mpggd.phi must be in [0, 1)")
        if self.max_epochs < 1:
            raise ConfigError("mpggd.max_epochs must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    target: str = "rater1"
    use_student: bool = False
    batch_size: int = 16

    def __post_init__(self):
        if self.target not in EVAL_TARGETS:
            raise ConfigError(f"eval.target must be one of {EVAL_TARGETS}")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    mpggd: MpggdConfig = field(default_factory=MpggdConfig)
    noise_aware: NoiseAwareConfig = field(default_factory=NoiseAwareConfig)
    recipe: Recipe = field(default_factory=Recipe)
    eval: EvalConfig = field(default_factory=EvalConfig)
    arch: str = "linknet"
    output_dir: str = "output"
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.arch not in ARCH_PRESETS:
            raise ConfigError(f"arch must be one of {sorted(ARCH_PRESETS)}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def path(self, *parts: str) -> Path:
        return Path(self.output_dir, *parts)

    def store_dir(self, stage: str, tag: Optional[str] = None) -> Path:
        """``pseudo/``, ``partition/`` or their ``-<tag>`` variants."""
        return self.path(f"{stage}-{tag}" if tag else stage)

    @property
    def dataset_root(self) -> Path:
        if self.dataset.root is not None:
            return Path(self.dataset.root)
        if self.dataset.kind == "synthetic":
            return self.path("data")
        raise ConfigError("dataset.root is required for RIGA data")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return _build(cls, data, "")


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(value, hint, where: str):
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        for option in get_args(hint):
            try:
                return _coerce(value, option, where)
            except ConfigError:
                continue
        raise ConfigError(f"{where}: {value!r} does not match {hint}")
    if origin is Literal:
        if value not in get_args(hint):
            raise ConfigError(f"{where}: {value!r} is not one of {get_args(hint)}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, where) for v, a in zip(value, args))
    if hint is type(None):
        if value is not None:
            raise ConfigError(f"{where}: expected null")
        return None
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint in (bool, str) and not isinstance(value, hint):
        raise ConfigError(f"{where}: expected {hint.__name__}, got {value!r}")
    return value


def _build(cls, data, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {data!r}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {unknown}")
    kwargs = {
        key: _coerce(value, hints[key], f"{where}.{key}".lstrip("."))
        for key, value in data.items()
    }
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def deep_merge(base: dict, top: Mapping) -> dict:
    merged = dict(base)
    for key, value in top.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_layers(path: Path, stack: tuple[Path, ...] = ()) -> dict:
    path = path.resolve()
    if path in stack:
        raise ConfigError(f"include cycle through {path}")
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        document = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = document.pop("include", None) or []
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for include in includes:
        merged = deep_merge(merged, _read_layers(path.parent / include, stack + (path,)))
    return deep_merge(merged, document)


def apply_override(data: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` assignment in place."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value: {assignment!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {raw!r}: {e}") from e
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value
    return data


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    environ = os.environ if environ is None else environ
    data = _read_layers(Path(path)) if path else {}
    if environ.get(ENV_OUTPUT_DIR):
        data["output_dir"] = environ[ENV_OUTPUT_DIR]
    if environ.get(ENV_SEED):
        try:
            data["seed"] = int(environ[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer") from None
    for assignment in overrides:
        apply_override(data, assignment)
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def write_snapshot(cfg: RunConfig, directory: Union[str, Path]) -> str:
    """Write ``config.yaml`` and ``config.sha256``; returns the digest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    text = dump_config(cfg)
    digest = hashlib.sha256(text.encode()).hexdigest()
    (directory / "config.yaml").write_text(text)
    (directory / "config.sha256").write_text(digest + "\n")
    return digest


def read_snapshot(directory: Union[str, Path]) -> RunConfig:
    path = Path(directory) / "config.yaml"
    if not path.exists():
        raise ConfigError(f"no config snapshot in {directory}")
    return RunConfig.from_dict(yaml.safe_load(path.read_text()))
