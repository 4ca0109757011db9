# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Shared fixtures: small synthetic datasets and a minimal run configuration."""

import numpy as np
import pytest
import yaml

from mpnn_mcp_server.pipeline.datasets import ChannelStats, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_pair():
    """Eight 32×32 synthetic samples, standardized: ``(noisy, clean)``."""
    noisy, clean = synth_generate(seed=0, count=8, side=32, boundary_noise=0.3)
    stats = ChannelStats.from_images(s.image for s in noisy.samples)
    return noisy.standardized(stats), clean.standardized(stats)


@pytest.fixture(scope="session")
def small_dataset(synth_pair):
    return synth_pair[0]


def write_config(path, output_dir, **sections):
    """Minimal synthetic run on micro networks, with section-level overrides."""
    data = {
        "dataset": {
            "kind": "synthetic",
            "train_sources": ["train"],
            "test_sources": ["test"],
            "side": 32,
            "synth": {"seed": 0, "train_count": 6, "test_count": 4, "side": 32},
        },
        "mpggd": {"k": 2, "phi": 0.0, "max_epochs": 2},
        "noise_aware": {"perturbations": 2},
        "recipe": {"epochs": 1, "batch_size": 3},
        "arch": "micro",
        "output_dir": str(output_dir),
        "checkpoint_every": 1,
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            data[key] = {**data.get(key, {}), **value}
        else:
            data[key] = value
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture
def config_file(tmp_path):
    return write_config(tmp_path / "run.yaml", tmp_path / "out")


@pytest.fixture
def make_config(tmp_path):
    """Factory: ``make_config(name="run.yaml", **sections)`` writes a config file."""

    def factory(name="run.yaml", output_dir=None, **sections):
        return write_config(tmp_path / name, output_dir or tmp_path / "out", **sections)

    return factory
