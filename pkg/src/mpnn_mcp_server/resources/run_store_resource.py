#!/usr/bin/env python3

# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

import hashlib
import json
from pathlib import Path
from typing import Optional

from ..config import RunConfig
from ..pipeline.evaluate import parse_report
from ..tools.utils import get_time_range, in_time_range


class RunStoreResource:
    """Read-only views of a pipeline output directory."""

    def __init__(self, config: RunConfig):
        """Initialize the run store view.

        Args:
            config: Run configuration whose ``output_dir`` is inspected
        """
        self.config = config
        self.root = Path(config.output_dir)

    def _read_json(self, path: Path) -> Optional[dict]:
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def list_runs(
        self, hours: int = None, start_time: str = None, end_time: str = None
    ) -> str:
        """
        List training runs, optionally only those created in a time window.

        Args:
            hours: Only runs created in the last N hours (default: all runs)
            start_time: Optional ISO8601 start time. Naive values are UTC.
            end_time: Optional ISO8601 end time. Naive values are UTC.

        Returns:
            JSON string with one entry per run
        """
        start_ts, end_ts = get_time_range(hours, start_time, end_time)
        runs = []
        runs_dir = self.root / "runs"
        for run_dir in sorted(runs_dir.iterdir()) if runs_dir.is_dir() else []:
            summary = self._read_json(run_dir / "summary.json")
            if summary is None:
                runs.append({"name": run_dir.name, "status": "incomplete"})
                continue
            if not in_time_range(summary.get("created_at"), start_ts, end_ts):
                continue
            runs.append(
                {
                    "name": summary["name"],
                    "status": "finished",
                    "mode": summary.get("mode"),
                    "ablate": summary.get("ablate"),
                    "seed": summary.get("seed"),
                    "steps": summary.get("steps"),
                    "createdAt": summary.get("created_at"),
                }
            )
        return json.dumps({"outputDir": str(self.root), "runs": runs}, indent=2)

    def get_run_summary(self, run_name: str) -> str:
        """Summary of one run, with a check that its config snapshot is intact."""
        run_dir = self.root / "runs" / run_name
        summary = self._read_json(run_dir / "summary.json")
        if summary is None:
            return json.dumps({"error": f"Run '{run_name}' not found"}, indent=2)
        snapshot = run_dir / "config.yaml"
        digest_file = run_dir / "config.sha256"
        if snapshot.exists() and digest_file.exists():
            digest = hashlib.sha256(snapshot.read_bytes()).hexdigest()
            summary["configVerified"] = digest == digest_file.read_text().strip()
        checkpoints = sorted((run_dir / "checkpoints").glob("epoch_*.pt"))
        summary["checkpoints"] = [p.name for p in checkpoints]
        return json.dumps(summary, indent=2)

    def get_run_metrics(self, run_name: str, tail: int = 20) -> str:
        """
        Latest per-step training metrics of a run.

        Args:
            run_name: Name of the run under runs/
            tail: Number of most recent records to return
        """
        path = self.root / "runs" / run_name / "metrics.jsonl"
        if not path.exists():
            return json.dumps({"error": f"No metrics for run '{run_name}'"}, indent=2)
        records = [json.loads(line) for line in path.read_text().splitlines() if line]
        losses = [r["loss"] for r in records]
        result = {
            "run": run_name,
            "steps": len(records),
            "firstLoss": losses[0] if losses else None,
            "lastLoss": losses[-1] if losses else None,
            "recent": records[-tail:],
        }
        return json.dumps(result, indent=2)

    def get_partition_summary(self, tag: str = None, top: int = 5) -> str:
        """Clean/noisy totals of a partition store and its noisiest images."""
        manifest = self._read_json(self.config.store_dir("partition", tag) / "manifest.json")
        if manifest is None:
            return json.dumps({"error": "No partition store found"}, indent=2)
        per_image = manifest.pop("noisy_pixels", {})
        noisiest = sorted(per_image.items(), key=lambda item: (-item[1], item[0]))[:top]
        manifest["noisiestImages"] = [{"id": i, "noisyPixels": n} for i, n in noisiest]
        manifest["noisyFraction"] = (
            manifest["s_no"] / manifest["pixels"] if manifest.get("pixels") else 0.0
        )
        return json.dumps(manifest, indent=2)

    def get_reports(self) -> str:
        """All evaluation rows written so far."""
        reports_dir = self.root / "reports"
        rows = []
        for path in sorted(reports_dir.glob("*.csv")) if reports_dir.is_dir() else []:
            rows.extend(report.row() for report in parse_report(path))
        return json.dumps({"reports": rows}, indent=2)
