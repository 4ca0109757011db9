#!/usr/bin/env python3

# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

import asyncio
import json

from . import handle_exceptions
from .. import cli
from ..config import RunConfig


class LabelNoiseTools:
    """Tools for building datasets, pseudo-labels and clean/noisy partitions."""

    def __init__(self, config: RunConfig):
        """Initialize the tools.

        Args:
            config: Effective run configuration for every call
        """
        self.config = config

    @handle_exceptions
    async def generate_synthetic_dataset(self, force: bool = False) -> str:
        """
        Generate the synthetic disc/cup dataset with noisy and exact masks.

        Args:
            force: Replace an existing dataset directory

        Returns:
            JSON string with the dataset manifest
        """
        manifest = await asyncio.to_thread(cli.cmd_synth, self.config, force)
        manifest["ids"] = {split: len(ids) for split, ids in manifest["ids"].items()}
        return json.dumps(manifest, indent=2)

    @handle_exceptions
    async def generate_pseudo_labels(
        self, k: int = None, phi: float = None, tag: str = None
    ) -> str:
        """
        Train the ensemble until each member reaches DSC_m >= phi and store its predictions.

        Args:
            k: Ensemble size (default from config)
            phi: Stopping threshold (default from config)
            tag: Store under pseudo-<tag>/ for ablation sweeps

        Returns:
            JSON string with the stopping epoch and DSC_m of every member
        """
        summary = await asyncio.to_thread(
            cli.cmd_pseudo, self.config, k=k, phi=phi, tag=tag
        )
        for member in summary["members"]:
            member.pop("history", None)
        return json.dumps(summary, indent=2)

    @handle_exceptions
    async def partition_pixels(self, tag: str = None, overlays: int = 0) -> str:
        """
        Partition training pixels into clean (all pseudo-labels agree) and noisy sets.

        Args:
            tag: Read pseudo-<tag>/ and write partition-<tag>/
            overlays: Number of noisy-pixel overlay images to write

        Returns:
            JSON string with s_cl/s_no totals and the boundary concentration
        """
        manifest = await asyncio.to_thread(
            cli.cmd_partition, self.config, tag=tag, overlays=overlays
        )
        return json.dumps(manifest, indent=2)
