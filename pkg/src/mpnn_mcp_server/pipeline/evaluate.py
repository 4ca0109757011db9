# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Per-class IoU/Dice, model evaluation and report tables."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch

from ..errors import ConfigError, ShapeMismatchError
from .datasets import CUP, DISC, LabeledDataset
from .model import predict_mask

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "target", "iou_disc", "iou_cup", "dice_disc", "dice_cup")
EVAL_TARGETS = ("rater1", "majority-vote", "clean")


def _class_masks(pred, gt, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred == class_id, gt == class_id


def iou(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """|pred ∩ gt| / |pred ∪ gt| for one class; 1.0 when both are empty."""
    p, g = _class_masks(pred, gt, class_id)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|pred ∩ gt| / (|pred| + |gt|) for one class; 1.0 when both are empty."""
    p, g = _class_masks(pred, gt, class_id)
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(p, g).sum() / total)


@dataclass(frozen=True)
class SampleMetrics:
    id: str
    iou_disc: float
    iou_cup: float
    dice_disc: float
    dice_cup: float

    @classmethod
    def compute(cls, sample_id: str, pred: np.ndarray, gt: np.ndarray) -> "SampleMetrics":
        return cls(
            sample_id,
            100.0 * iou(pred, gt, DISC),
            100.0 * iou(pred, gt, CUP),
            100.0 * dice(pred, gt, DISC),
            100.0 * dice(pred, gt, CUP),
        )


@dataclass(frozen=True)
class MetricsReport:
    """Macro-averaged metrics in percent plus the per-sample breakdown."""

    method: str
    target: str
    iou_disc: float
    iou_cup: float
    dice_disc: float
    dice_cup: float
    per_sample: tuple[SampleMetrics, ...] = field(default=(), compare=False)

    @classmethod
    def from_samples(
        cls, method: str, target: str, per_sample: Sequence[SampleMetrics]
    ) -> "MetricsReport":
        per_sample = tuple(per_sample)
        means = {
            key: float(np.mean([getattr(s, key) for s in per_sample]))
            if per_sample
            else 0.0
            for key in REPORT_COLUMNS[2:]
        }
        return cls(method, target, per_sample=per_sample, **means)

    @property
    def dsc_m(self) -> float:
        return (self.dice_disc + self.dice_cup) / 2

    def row(self) -> dict:
        return {key: getattr(self, key) for key in REPORT_COLUMNS}

    def to_json(self) -> str:
        data = self.row()
        data["per_sample"] = [asdict(s) for s in self.per_sample]
        return json.dumps(data, indent=2)


def predict_dataset(
    params: torch.nn.Module, dataset: LabeledDataset, batch_size: int = 16
) -> np.ndarray:
    """Arg-max masks for every sample, N×H×W, in dataset order."""
    chunks = []
    for start in range(0, len(dataset), batch_size):
        indices = range(start, min(start + batch_size, len(dataset)))
        chunks.append(predict_mask(params, dataset.images(indices), batch_size))
    return np.concatenate(chunks)


def evaluate_masks(
    predictions: np.ndarray,
    dataset: LabeledDataset,
    method: str = "model",
    target: str = "rater1",
) -> MetricsReport:
    per_sample = [
        SampleMetrics.compute(sample.id, pred, sample.label)
        for sample, pred in zip(dataset.samples, predictions)
    ]
    return MetricsReport.from_samples(method, target, per_sample)


def evaluate_model(
    params: torch.nn.Module,
    dataset: LabeledDataset,
    method: str = "model",
    target: str = "rater1",
    batch_size: int = 16,
) -> MetricsReport:
    """Predict every sample and score it against the dataset's labels."""
    predictions = predict_dataset(params, dataset, batch_size)
    report = evaluate_masks(predictions, dataset, method, target)
    logger.info(
        "%s on %s: IoU disc %.2f cup %.2f | Dice disc %.2f cup %.2f",
        method,
        target,
        report.iou_disc,
        report.iou_cup,
        report.dice_disc,
        report.dice_cup,
    )
    return report


# ==============================
# Report files
# ==============================


def emit_report(reports: Sequence[MetricsReport], path: Union[str, Path]) -> Path:
    """Write a CSV table (one row per report) and a Markdown rendering next to it.

    Returns:
        Path of the CSV file
    """
    path = Path(path)
    if path.suffix.lower() == ".md":
        raise ConfigError(f"report path {path} would collide with its Markdown table")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.row())
    path.with_suffix(".md").write_text(render_markdown(reports))
    return path


def parse_report(path: Union[str, Path]) -> list[MetricsReport]:
    with Path(path).open(newline="") as fh:
        return [
            MetricsReport(
                row["method"],
                row["target"],
                *(float(row[key]) for key in REPORT_COLUMNS[2:]),
            )
            for row in csv.DictReader(fh)
        ]


def render_markdown(reports: Sequence[MetricsReport]) -> str:
    header = "| Method | Target | IoU disc (%) | IoU cup (%) | Dice disc (%) | Dice cup (%) |"
    lines = [header, "|" + "---|" * 6]
    for r in reports:
        lines.append(
            f"| {r.method} | {r.target} | {r.iou_disc:.2f} | {r.iou_cup:.2f} "
            f"| {r.dice_disc:.2f} | {r.dice_cup:.2f} |"
        )
    return "\n".join(lines) + "\n"
