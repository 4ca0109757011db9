#!/usr/bin/env python3

# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

import argparse
import asyncio
from functools import wraps
from typing import Any, Callable, List, Optional, Type

from mcp.server.fastmcp import FastMCP

from .cli import configure_logging
from .config import load_config
from .resources.run_store_resource import RunStoreResource
from .tools import handle_exceptions
from .tools.label_tools import LabelNoiseTools
from .tools.training_tools import TrainingTools

# Parse command line arguments
parser = argparse.ArgumentParser(
    description="MPNN Segmentation Pipeline MCP Server", allow_abbrev=False
)
parser.add_argument("--config", type=str, help="Default YAML run configuration")
parser.add_argument(
    "--set",
    dest="overrides",
    action="append",
    default=[],
    metavar="KEY=VALUE",
    help="Default config overrides applied to every call",
)
parser.add_argument(
    "--stateless", action="store_true", help="Stateless HTTP mode", default=False
)
args, unknown = parser.parse_known_args()


# Create the MCP server for the segmentation pipeline
mcp = FastMCP("MPNN Segmentation Pipeline", stateless_http=args.stateless)

# Capture the parsed CLI defaults in separate variables
default_config = args.config
default_overrides = list(args.overrides)


def run_store() -> RunStoreResource:
    return RunStoreResource(load_config(default_config, default_overrides))


# Helper decorator to resolve the run configuration for tools
def with_run_config(tool_class: Type, method_name: Optional[str] = None) -> Callable:
    """
    Decorator that handles the config_path and overrides parameters for tool functions.
    Creates a new instance of the specified tool class with the effective configuration.

    Args:
        tool_class: The class to instantiate with the configuration
        method_name: Optional method name if different from the decorated function
    """

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        @handle_exceptions
        async def wrapper(*args, **kwargs) -> Any:
            config_path = kwargs.pop("config_path", None) or default_config
            overrides = default_overrides + list(kwargs.pop("overrides", None) or [])
            tool_instance = tool_class(load_config(config_path, overrides))
            target_method = method_name or func.__name__
            method = getattr(tool_instance, target_method, None)
            if method is None:
                raise RuntimeError(
                    f"Method {target_method} not found in {tool_class.__name__}"
                )
            result = method(**kwargs)
            if asyncio.iscoroutine(result):
                return await result
            return result

        return wrapper

    return decorator


# ==============================
# Resource Handlers
# ==============================


@mcp.resource("runs://list")
def get_runs() -> str:
    """Get a list of all training runs in the output directory"""
    return run_store().list_runs()


@mcp.resource("runs://partition/summary")
def get_partition_summary() -> str:
    """Get clean/noisy pixel totals of the default partition store"""
    return run_store().get_partition_summary()


@mcp.resource("runs://reports")
def get_reports() -> str:
    """Get every evaluation row written so far"""
    return run_store().get_reports()


@mcp.resource("runs://{run_name}/summary")
def get_run_summary(run_name: str) -> str:
    """
    Get the summary of a training run

    Args:
        run_name: The name of the run under runs/
    """
    return run_store().get_run_summary(run_name)


@mcp.resource("runs://{run_name}/metrics")
def get_run_metrics(run_name: str) -> str:
    """
    Get the most recent per-step metrics of a training run

    Args:
        run_name: The name of the run under runs/
    """
    # Use default tail value
    tail = 20
    return run_store().get_run_metrics(run_name, tail)


# ==============================
# Prompts
# ==============================


@mcp.prompt()
def analyze_label_noise(config_path: str = None) -> str:
    """
    Prompt for running the pipeline and inspecting where the annotation noise is.

    Args:
        config_path: Optional YAML run configuration to use
    """
    config_text = f" with the configuration in '{config_path}'" if config_path else ""

    return f"""I'll help you separate clean from noisy annotation pixels and train a noise-aware segmentation network{config_text}.

The pipeline runs in this order:
1. generate_synthetic_dataset (synthetic data only) to create images with noisy and exact masks
2. generate_pseudo_labels to train K networks until their mean disc/cup Dice reaches phi
3. partition_pixels to mark pixels where all K pseudo-labels agree as clean
4. train_model with mode "baseline" and mode "mpnn" to compare both trainings
5. evaluate_checkpoint on each run's final.pt, then build_report

After the partition step, read runs://partition/summary and check:
- The share of noisy pixels and which images carry the most of them
- Whether noisy pixels concentrate near the disc and cup boundaries

After training, read runs://<run>/metrics to confirm the losses decrease and the gated pixel count grows as the uncertainty threshold ramps up.
"""


@mcp.prompt()
def compare_ablations(target: str = "rater1") -> str:
    """
    Prompt for comparing the clean/noisy ablation grid.

    Args:
        target: Test labels to compare on (rater1, majority-vote or clean)
    """
    return f"""Please compare the four training variants on the {target} test labels.

1. baseline: cross-entropy on every pixel of the noisy labels
2. mpnn with ablate "noisy-only": cross-entropy on every pixel plus the consistency term on noisy pixels
3. mpnn with ablate "clean-only": cross-entropy on clean pixels only, no consistency term
4. mpnn with ablate "none": cross-entropy on clean pixels plus the consistency term on noisy pixels

Train any missing variant with train_model, evaluate each final.pt with evaluate_checkpoint using target "{target}", then call build_report.

Based on the merged table, please:
- Rank the variants by mean disc/cup Dice
- Say whether excluding noisy pixels from supervision helps on its own
- Say whether the consistency term adds to it
"""


# ==============================
# Tool Handlers
# ==============================


@mcp.tool()
@with_run_config(LabelNoiseTools)
async def generate_synthetic_dataset(
    force: bool = False, config_path: str = None, overrides: List[str] = None
) -> str:
    """
    Generate the synthetic disc/cup dataset with boundary-perturbed and exact masks.

    Args:
        force: Replace an existing dataset directory
        config_path: Optional YAML run configuration (default: server --config)
        overrides: Optional list of "dotted.key=value" config overrides

    Returns:
        JSON string with the dataset manifest
    """
    # Function body is handled by the decorator
    pass


@mcp.tool()
@with_run_config(LabelNoiseTools)
async def generate_pseudo_labels(
    k: int = None,
    phi: float = None,
    tag: str = None,
    config_path: str = None,
    overrides: List[str] = None,
) -> str:
    """
    Train K differently seeded networks to the DSC_m threshold and store their pseudo-labels.

    Args:
        k: Ensemble size (default from config)
        phi: DSC_m stopping threshold (default from config)
        tag: Store under pseudo-<tag>/ for ablation sweeps
        config_path: Optional YAML run configuration (default: server --config)
        overrides: Optional list of "dotted.key=value" config overrides

    Returns:
        JSON string with each member's stopping epoch and DSC_m
    """
    # Function body is handled by the decorator
    pass


@mcp.tool()
@with_run_config(LabelNoiseTools)
async def partition_pixels(
    tag: str = None,
    overlays: int = 0,
    config_path: str = None,
    overrides: List[str] = None,
) -> str:
    """
    Split training pixels into clean and noisy sets by pseudo-label consensus.

    Args:
        tag: Read pseudo-<tag>/ and write partition-<tag>/
        overlays: Number of noisy-pixel overlay images to write
        config_path: Optional YAML run configuration (default: server --config)
        overrides: Optional list of "dotted.key=value" config overrides

    Returns:
        JSON string with clean/noisy totals and boundary concentration
    """
    # Function body is handled by the decorator
    pass


@mcp.tool()
@with_run_config(TrainingTools)
async def train_model(
    mode: str = "mpnn",
    ablate: str = "none",
    name: str = None,
    partition_tag: str = None,
    force: bool = False,
    config_path: str = None,
    overrides: List[str] = None,
) -> str:
    """
    Train a baseline or noise-aware segmentation network.

    Args:
        mode: "baseline" or "mpnn"
        ablate: "none", "clean-only" or "noisy-only" (mpnn mode only)
        name: Run name (default derived from mode, ablation and seed)
        partition_tag: Use partition-<tag>/ instead of partition/
        force: Overwrite a finished run of the same name
        config_path: Optional YAML run configuration (default: server --config)
        overrides: Optional list of "dotted.key=value" config overrides

    Returns:
        JSON string with the run summary
    """
    # Function body is handled by the decorator
    pass


@mcp.tool()
@with_run_config(TrainingTools)
async def evaluate_checkpoint(
    checkpoint: str,
    target: str = None,
    use_student: bool = False,
    config_path: str = None,
    overrides: List[str] = None,
) -> str:
    """
    Compute per-class IoU and Dice of a checkpoint on the test split.

    Args:
        checkpoint: Path to final.pt or an epoch checkpoint
        target: "rater1", "majority-vote" or "clean" (default from config)
        use_student: Evaluate the student instead of the teacher
        config_path: Optional YAML run configuration (default: server --config)
        overrides: Optional list of "dotted.key=value" config overrides

    Returns:
        JSON string with the metrics row
    """
    # Function body is handled by the decorator
    pass


@mcp.tool()
@with_run_config(TrainingTools)
async def build_report(config_path: str = None, overrides: List[str] = None) -> str:
    """
    Merge all evaluation reports into report.csv and report.md.

    Args:
        config_path: Optional YAML run configuration (default: server --config)
        overrides: Optional list of "dotted.key=value" config overrides

    Returns:
        JSON string with the merged rows
    """
    # Function body is handled by the decorator
    pass


@mcp.tool()
@with_run_config(RunStoreResource, method_name="list_runs")
async def list_runs(
    hours: int = None,
    start_time: str = None,
    end_time: str = None,
    config_path: str = None,
    overrides: List[str] = None,
) -> str:
    """
    List training runs, optionally filtered by creation time.

    Args:
        hours: Only runs created in the last N hours (default: all runs)
        start_time: Optional ISO8601 start time. Naive (offset-less) values are
            interpreted as UTC; explicit offsets (e.g. "Z" or "+09:00") are honored.
        end_time: Optional ISO8601 end time. Naive (offset-less) values are
            interpreted as UTC; explicit offsets (e.g. "Z" or "+09:00") are honored.
        config_path: Optional YAML run configuration (default: server --config)
        overrides: Optional list of "dotted.key=value" config overrides

    Returns:
        JSON string with the matching runs
    """
    # Function body is handled by the decorator
    pass


def main() -> None:
    configure_logging("INFO")
    # Run the MCP server
    mcp.run()


if __name__ == "__main__":
    main()
