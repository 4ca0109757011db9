#!/usr/bin/env python3

# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

import asyncio
import json

from . import handle_exceptions
from .. import cli
from ..config import RunConfig


class TrainingTools:
    """Tools for training, evaluating and tabulating segmentation runs."""

    def __init__(self, config: RunConfig):
        """Initialize the tools.

        Args:
            config: Effective run configuration for every call
        """
        self.config = config

    @handle_exceptions
    async def train_model(
        self,
        mode: str = "mpnn",
        ablate: str = "none",
        name: str = None,
        partition_tag: str = None,
        force: bool = False,
    ) -> str:
        """
        Train a baseline or noise-aware network.

        Args:
            mode: "baseline" (cross-entropy on all labels) or "mpnn"
            ablate: "none", "clean-only" or "noisy-only"
            name: Run name (default derived from mode, ablation and seed)
            partition_tag: Use partition-<tag>/ instead of partition/
            force: Overwrite a finished run of the same name

        Returns:
            JSON string with the run summary
        """
        summary = await asyncio.to_thread(
            cli.cmd_train,
            self.config,
            mode=mode,
            ablate=ablate,
            name=name,
            partition_tag=partition_tag,
            force=force,
        )
        return json.dumps(summary, indent=2)

    @handle_exceptions
    async def evaluate_checkpoint(
        self, checkpoint: str, target: str = None, use_student: bool = False
    ) -> str:
        """
        Score a checkpoint on the test split.

        Args:
            checkpoint: Path to final.pt or an epoch checkpoint
            target: "rater1", "majority-vote" or "clean" (default from config)
            use_student: Evaluate the student instead of the teacher

        Returns:
            JSON string with IoU and Dice per class in percent
        """
        row = await asyncio.to_thread(
            cli.cmd_eval,
            self.config,
            checkpoint,
            target=target,
            use_student=use_student or None,
        )
        return json.dumps(row, indent=2)

    @handle_exceptions
    async def build_report(self) -> str:
        """
        Merge every evaluation into report.csv and report.md.

        Returns:
            JSON string with the merged rows
        """
        result = await asyncio.to_thread(cli.cmd_report, self.config)
        return json.dumps(result, indent=2)
