#!/usr/bin/env python3

# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, load_config, write_snapshot
from .errors import ConfigError, MPNNError
from .pipeline import datasets, evaluate, mpggd, trainer
from .pipeline.model import load_network, save_network

logger = logging.getLogger("mpnn_mcp_server")

TARGET_RATERS = {"rater1": 1, "majority-vote": "majority", "clean": "clean"}
ABLATIONS = ("none", "clean-only", "noisy-only")
LOG_FORMAT = "[%(asctime)s.%(msecs)03d] %(levelname)s %(name)s: %(message)s"

# Set up argument parser for the CLI
parser = argparse.ArgumentParser(
    prog="mpnn", description="Noise-aware disc/cup segmentation pipeline"
)
parser.add_argument("--config", type=str, help="YAML run configuration")
parser.add_argument(
    "--set",
    dest="overrides",
    action="append",
    default=[],
    metavar="KEY=VALUE",
    help="Override a config value, e.g. --set mpggd.k=3 (repeatable)",
)
parser.add_argument(
    "--log-level", default="INFO", help="Logging level (default: INFO)"
)
parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
subparsers = parser.add_subparsers(dest="command", help="Pipeline stage to run")

# Synthetic dataset
synth_parser = subparsers.add_parser(
    "synth", help="Generate the synthetic boundary-noise dataset"
)
synth_parser.add_argument(
    "--force", action="store_true", help="Replace an existing dataset directory"
)

# Pseudo-labels
pseudo_parser = subparsers.add_parser(
    "pseudo", help="Train the K-member ensemble and write pseudo-labels"
)
pseudo_parser.add_argument("--k", type=int, help="Ensemble size (overrides mpggd.k)")
pseudo_parser.add_argument(
    "--phi", type=float, help="DSC_m stopping threshold (overrides mpggd.phi)"
)
pseudo_parser.add_argument("--tag", help="Write to pseudo-<tag>/ for ablation sweeps")

# Partition
partition_parser = subparsers.add_parser(
    "partition", help="Split pixels into clean/noisy sets by pseudo-label consensus"
)
partition_parser.add_argument("--tag", help="Read pseudo-<tag>/, write partition-<tag>/")
partition_parser.add_argument(
    "--overlays",
    type=int,
    default=0,
    metavar="N",
    help="Write noisy-pixel overlays for the first N images",
)

# Training
train_parser = subparsers.add_parser("train", help="Train a segmentation network")
train_parser.add_argument(
    "--mode", choices=("baseline", "mpnn"), default="mpnn", help="Training mode"
)
train_parser.add_argument(
    "--ablate",
    choices=ABLATIONS,
    default="none",
    help="clean-only: no consistency term; noisy-only: CE on all pixels plus consistency",
)
train_parser.add_argument("--name", help="Run name under runs/ (default from mode/seed)")
train_parser.add_argument("--partition-tag", help="Use partition-<tag>/")
train_parser.add_argument("--resume", help="Training checkpoint to continue from")
train_parser.add_argument(
    "--force", action="store_true", help="Overwrite a finished run of the same name"
)

# Evaluation
eval_parser = subparsers.add_parser("eval", help="Score a checkpoint on the test split")
eval_parser.add_argument("checkpoint", help="Checkpoint file (final.pt or epoch_XXXX.pt)")
eval_parser.add_argument(
    "--target", choices=tuple(TARGET_RATERS), help="Ground truth (overrides eval.target)"
)
eval_parser.add_argument(
    "--use-student", action="store_true", help="Evaluate the student instead of the teacher"
)
eval_parser.add_argument("--name", help="Method name in the report (default: run name)")

# Report
subparsers.add_parser("report", help="Merge all evaluation reports into one table")


# ==============================
# Shared plumbing
# ==============================


def configure_logging(level: str = "INFO") -> None:
    root = logging.getLogger()
    root.setLevel(level.upper())
    if not any(getattr(h, "_mpnn", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%H:%M:%S"))
        handler._mpnn = True
        root.addHandler(handler)


@contextmanager
def stage(directory: Path):
    """Hold the directory's writer lock and mirror log records into its log.txt."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"{directory} is locked by another writer (remove {lock} if stale)"
        ) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    handler = logging.FileHandler(directory / "log.txt")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%H:%M:%S"))
    logging.getLogger().addHandler(handler)
    try:
        yield directory
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
        lock.unlink(missing_ok=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2))


def load_split(
    cfg: RunConfig, split: str, rater=None
) -> tuple[datasets.LabeledDataset, datasets.ChannelStats]:
    """Training split (freezing its channel statistics) or test split."""
    ds = cfg.dataset
    rater = ds.rater if rater is None else rater
    stats_path = cfg.path("stats.json")
    if split == "train":
        sources = list(ds.train_sources) if ds.train_sources else None
        dataset, stats = datasets.load_riga_split(cfg.dataset_root, rater, sources, ds.side)
        stats_path.parent.mkdir(parents=True, exist_ok=True)
        stats.save(stats_path)
        return dataset, stats
    if stats_path.exists():
        stats = datasets.ChannelStats.load(stats_path)
    else:
        _, stats = load_split(cfg, "train")
    sources = list(ds.test_sources) if ds.test_sources else None
    return datasets.load_riga_split(cfg.dataset_root, rater, sources, ds.side, stats)


# ==============================
# Subcommands
# ==============================


def cmd_synth(cfg: RunConfig, force: bool = False) -> dict:
    """Write the synthetic dataset in RIGA layout under the dataset root."""
    if cfg.dataset.kind != "synthetic":
        raise ConfigError("synth needs dataset.kind: synthetic")
    s = cfg.dataset.synth
    root = cfg.dataset_root
    if root.exists() and any(root.iterdir()):
        if not force:
            raise ConfigError(f"{root} already exists; pass --force to regenerate")
        shutil.rmtree(root)
    noisy, clean = datasets.synth_generate(
        s.seed, s.train_count + s.test_count, s.side, s.boundary_noise, s.boundary_bias
    )
    splits = {"train": noisy.ids[: s.train_count], "test": noisy.ids[s.train_count :]}
    sources = {
        "train": (cfg.dataset.train_sources or ("train",))[0],
        "test": (cfg.dataset.test_sources or ("test",))[0],
    }
    with stage(root):
        for split, ids in splits.items():
            if not ids:
                continue
            subset = datasets.LabeledDataset([noisy.by_id(i) for i in ids])
            datasets.write_riga_layout(root / sources[split], subset, clean)
        agreement = float(
            np.mean(
                [mpggd.dsc_m(n.label, c.label) for n, c in zip(noisy.samples, clean.samples)]
            )
        )
        manifest = {
            "seed": s.seed,
            "side": s.side,
            "boundary_noise": s.boundary_noise,
            "boundary_bias": s.boundary_bias,
            "count": len(noisy),
            "sources": sources,
            "ids": splits,
            "noisy_vs_clean_dsc_m": agreement,
            "created_at": _now(),
        }
        _write_json(root / "manifest.json", manifest)
    logger.info(
        "Wrote %d synthetic samples to %s (noisy vs clean DSC_m %.4f)",
        len(noisy),
        root,
        agreement,
    )
    return manifest


def cmd_pseudo(
    cfg: RunConfig,
    k: Optional[int] = None,
    phi: Optional[float] = None,
    tag: Optional[str] = None,
    progress: bool = False,
) -> dict:
    """Train the ensemble to the DSC_m threshold and store its pseudo-labels."""
    m = cfg.mpggd
    k = m.k if k is None else k
    phi = m.phi if phi is None else phi
    dataset, _ = load_split(cfg, "train")
    with stage(cfg.store_dir("pseudo", tag)) as out:
        pseudo = mpggd.generate_pseudo_labels(
            dataset,
            k,
            phi,
            m.base_seed,
            max_epochs=m.max_epochs,
            recipe=cfg.recipe,
            arch=cfg.arch,
            progress=progress,
        )
        pseudo.save(out)
        summary = {
            "store": str(out),
            "k": k,
            "phi": phi,
            "members": [asdict(member) for member in pseudo.members],
            "created_at": _now(),
        }
        _write_json(out / "summary.json", summary)
    for member in pseudo.members:
        logger.info(
            "seed %d stopped at epoch %d with DSC_m %.4f",
            member.seed,
            member.epoch,
            member.dsc_m,
        )
    return summary


def _raw_image(sample: datasets.ImageSample, stats: datasets.ChannelStats) -> np.ndarray:
    return datasets.to_uint8(sample.image * np.asarray(stats.std) + np.asarray(stats.mean))


def cmd_partition(cfg: RunConfig, tag: Optional[str] = None, overlays: int = 0) -> dict:
    """Consensus partition of every pseudo-labelled image."""
    pseudo = mpggd.PseudoLabelSet.load(cfg.store_dir("pseudo", tag))
    partitions = mpggd.partition_all(pseudo)
    # exact masks exist for synthetic data; otherwise measure against the training labels
    rater = "clean" if cfg.dataset.kind == "synthetic" else None
    dataset, stats = load_split(cfg, "train", rater)
    labels = {i: dataset.by_id(i).label for i in partitions}
    concentration = mpggd.boundary_concentration(partitions, labels)
    with stage(cfg.store_dir("partition", tag)) as out:
        manifest = mpggd.save_partitions(
            out, partitions, pseudo, extra={"boundary_concentration": concentration}
        )
        for image_id in sorted(partitions)[:overlays]:
            overlay = mpggd.render_noisy_overlay(
                _raw_image(dataset.by_id(image_id), stats), partitions[image_id]
            )
            overlay_dir = cfg.path("overlays")
            overlay_dir.mkdir(parents=True, exist_ok=True)
            datasets.write_image(overlay_dir / f"{image_id}.png", overlay)
    logger.info(
        "Partition: s_cl=%d s_no=%d over %d images (noisy rate near boundary %.4f, elsewhere %.4f)",
        manifest["s_cl"],
        manifest["s_no"],
        manifest["images"],
        concentration["near_boundary_rate"],
        concentration["elsewhere_rate"],
    )
    return {k: v for k, v in manifest.items() if k != "noisy_pixels"}


def default_run_name(mode: str, ablate: str, seed: int) -> str:
    label = mode if mode == "baseline" or ablate == "none" else f"mpnn-{ablate}"
    return f"{label}-s{seed}"


def cmd_train(
    cfg: RunConfig,
    mode: str = "mpnn",
    ablate: str = "none",
    name: Optional[str] = None,
    partition_tag: Optional[str] = None,
    resume: Optional[str] = None,
    force: bool = False,
    progress: bool = False,
) -> dict:
    """Baseline or noise-aware training into ``runs/<name>/``."""
    if mode not in ("baseline", "mpnn"):
        raise ConfigError(f"unknown mode {mode!r}")
    if ablate not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablate!r}; choose from {ABLATIONS}")
    if mode == "baseline" and ablate != "none":
        raise ConfigError("ablations apply to mpnn mode only")
    name = name or default_run_name(mode, ablate, cfg.seed)
    run_dir = cfg.path("runs", name)
    if (run_dir / "final.pt").exists() and not (force or resume):
        raise ConfigError(f"run {name} already finished; pass --force to overwrite")

    partitions = None
    if mode == "mpnn":
        partitions = mpggd.load_partitions(cfg.store_dir("partition", partition_tag))
    dataset, _ = load_split(cfg, "train")

    with stage(run_dir):
        if not resume:
            for stale in ("metrics.jsonl", "final.pt"):
                (run_dir / stale).unlink(missing_ok=True)
            shutil.rmtree(run_dir / "checkpoints", ignore_errors=True)
        digest = write_snapshot(cfg, run_dir)
        created_at = _now()
        trainer.seed_everything(cfg.seed)
        if mode == "baseline":
            with trainer.MetricsLog(run_dir / "metrics.jsonl") as log:
                net = trainer.train_baseline(
                    dataset, cfg.recipe, cfg.seed, cfg.arch, log=log, progress=progress
                )
            steps = cfg.recipe.epochs * cfg.recipe.steps_per_epoch(len(dataset))
            save_network(run_dir / "final.pt", net, step=steps, extra={"mode": mode})
        else:
            noise_cfg = cfg.noise_aware
            if ablate == "clean-only":
                noise_cfg = replace(noise_cfg, max_consistency_weight=0.0)
            trainer.train_mpnn(
                dataset,
                partitions,
                cfg.recipe,
                noise_cfg,
                cfg.seed,
                arch=cfg.arch,
                supervise_all=ablate == "noisy-only",
                run_dir=run_dir,
                checkpoint_every=cfg.checkpoint_every,
                resume_from=resume,
                progress=progress,
            )
            steps = cfg.recipe.epochs * cfg.recipe.steps_per_epoch(len(dataset))
        summary = {
            "name": name,
            "mode": mode,
            "ablate": ablate,
            "seed": cfg.seed,
            "arch": cfg.arch,
            "epochs": cfg.recipe.epochs,
            "steps": steps,
            "samples": len(dataset),
            "partition_tag": partition_tag,
            "checkpoint": str(run_dir / "final.pt"),
            "config_sha256": digest,
            "created_at": created_at,
            "finished_at": _now(),
        }
        _write_json(run_dir / "summary.json", summary)
    logger.info("Run %s finished after %d steps", name, steps)
    return summary


def _method_name(checkpoint: Path) -> str:
    run = checkpoint.parent
    if run.name == "checkpoints":
        return f"{run.parent.name}@{checkpoint.stem}"
    return run.name


def cmd_eval(
    cfg: RunConfig,
    checkpoint: str,
    target: Optional[str] = None,
    use_student: Optional[bool] = None,
    name: Optional[str] = None,
) -> dict:
    """Score a checkpoint against the chosen test labels and store the report."""
    target = target or cfg.eval.target
    if target not in TARGET_RATERS:
        raise ConfigError(f"unknown eval target {target!r}")
    use_student = cfg.eval.use_student if use_student is None else use_student
    checkpoint = Path(checkpoint)
    net, _ = load_network(checkpoint, cfg.arch, key="student" if use_student else None)
    dataset, _ = load_split(cfg, "test", TARGET_RATERS[target])
    method = name or _method_name(checkpoint)
    if use_student:
        method += "/student"
    report = evaluate.evaluate_model(net, dataset, method, target, cfg.eval.batch_size)
    stem = f"{method.replace('/', '-')}__{target}"
    reports_dir = cfg.path("reports")
    evaluate.emit_report([report], reports_dir / f"{stem}.csv")
    (reports_dir / f"{stem}.json").write_text(report.to_json())
    return report.row()


def cmd_report(cfg: RunConfig) -> dict:
    """Merge ``reports/*.csv`` into ``report.csv`` and ``report.md``."""
    reports_dir = cfg.path("reports")
    if not reports_dir.is_dir():
        raise ConfigError(f"no reports under {reports_dir}; run eval first")
    reports = []
    for path in sorted(reports_dir.glob("*.csv")):
        reports.extend(evaluate.parse_report(path))
    reports.sort(key=lambda r: (r.target, r.method))
    path = evaluate.emit_report(reports, cfg.path("report.csv"))
    logger.info("Merged %d rows into %s", len(reports), path)
    return {"report": str(path), "rows": [r.row() for r in reports]}


def run(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config, args.overrides)
    progress = not args.quiet and sys.stderr.isatty()
    if args.command == "synth":
        return cmd_synth(cfg, force=args.force)
    elif args.command == "pseudo":
        return cmd_pseudo(cfg, k=args.k, phi=args.phi, tag=args.tag, progress=progress)
    elif args.command == "partition":
        return cmd_partition(cfg, tag=args.tag, overlays=args.overlays)
    elif args.command == "train":
        return cmd_train(
            cfg,
            mode=args.mode,
            ablate=args.ablate,
            name=args.name,
            partition_tag=args.partition_tag,
            resume=args.resume,
            force=args.force,
            progress=progress,
        )
    elif args.command == "eval":
        return cmd_eval(
            cfg,
            args.checkpoint,
            target=args.target,
            use_student=args.use_student or None,
            name=args.name,
        )
    elif args.command == "report":
        return cmd_report(cfg)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point of the ``mpnn`` command; returns the process exit status."""
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0
    configure_logging(args.log_level)
    try:
        result = run(args)
    except MPNNError as e:
        logger.error("%s: %s", e.__class__.__name__, e)
        return e.exit_code
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
