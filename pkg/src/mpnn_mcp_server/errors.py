# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Exception hierarchy shared by the pipeline, the CLI and the MCP tools.

Each error carries the process exit status the CLI reports for it.
"""

from typing import Optional, Sequence


class MPNNError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(MPNNError):
    """Invalid configuration, missing stores or mismatched checkpoints."""

    exit_code = 2


class DatasetError(MPNNError, ValueError):
    """Malformed or degenerate input data."""

    exit_code = 2


class ShapeMismatchError(MPNNError, ValueError):
    """Arrays, masks or parameter sets that cannot be combined."""

    exit_code = 2


class ThresholdNotReachedError(MPNNError):
    """An ensemble member never reached the DSC_m stopping threshold."""

    exit_code = 3

    def __init__(self, seed: int, phi: float, best_dsc: float, epochs: int):
        self.seed = seed
        self.phi = phi
        self.best_dsc = best_dsc
        self.epochs = epochs
        super().__init__(
            f"member seed={seed} did not reach DSC_m >= {phi} within {epochs} "
            f"epochs (best {best_dsc:.4f})"
        )


class NumericFailureError(MPNNError):
    """A loss became NaN or infinite during training."""

    exit_code = 4

    def __init__(
        self,
        message: str,
        batch_ids: Sequence[str] = (),
        dump_path: Optional[str] = None,
    ):
        self.batch_ids = list(batch_ids)
        self.dump_path = dump_path
        detail = f" (batch: {', '.join(self.batch_ids)})" if self.batch_ids else ""
        if dump_path:
            detail += f"; diagnostics written to {dump_path}"
        super().__init__(message + detail)
