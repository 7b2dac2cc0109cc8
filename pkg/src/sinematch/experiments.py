"""Experiment recipes, the resumable grid runner, and report files.

Three experiment families:

- ablation_thresholds: fixed / adaptive-ascent / linear-decay /
  sinusoidal-decay schedules on the synthetic pool.
- pool_comparison: {real_clean, real_biased, synthetic} pools crossed with
  shrinking labeled-set sizes.
- baseline_vs_ssl: supervised-only (lambda_u = 0) against SSL with the
  sinusoidal schedule.

Each (cell, seed) run persists runs/<experiment>/<cell>/<seed>/
{metrics.csv, config.json, checkpoint/, done.marker}; completed cells are
skipped on rerun and the summary is recomputed from the persisted CSVs, so
an interrupted experiment finishes to the same summary as an uninterrupted
one.

The desk-scale model and diffusion settings here are sized for a single
CPU core; the larger type defaults remain available through configs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import make_bundle
from .errors import ConfigError
from .models import ClassifierConfig, DenoiserConfig, save_checkpoint
from .schedulers import schedule_from_config
from .training import TrainConfig, read_metrics_csv, train_run, write_metrics_csv

EXPERIMENT_NAMES = ("ablation_thresholds", "pool_comparison", "baseline_vs_ssl")

# Sized so one SSL run stays under ~10 CPU-minutes at the default 5000
# iterations; quality on the procedural corpus saturates well below the
# 500k-parameter budget anyway.
DESK_CLASSIFIER = ClassifierConfig(widths=(8, 16, 32), blocks_per_stage=1)
DESK_DENOISER = DenoiserConfig(base_channels=8, depth=2, time_embed_dim=32)
DESK_DIFFUSION = {"num_steps": 120, "beta_start": 1e-4, "beta_end": 0.07}

_DEFAULT_DATA = {
    "n_labeled_per_class": 10,
    "n_unlabeled": 6000,
    "n_test_per_class": 200,
    "data_seed": 0,
}

_SINE_CFG = {"kind": "sinusoidal_decay"}


@dataclass(frozen=True)
class Cell:
    """One grid point; together with a seed it fully specifies a run."""

    label: str
    schedule: dict
    pool_kind: str = "synthetic"
    n_labeled_per_class: int = 10
    lambda_u: Optional[float] = None  # None = take the base config's value


@dataclass
class ExperimentSpec:
    name: str
    cells: list
    seeds: tuple = (1, 2, 3)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=lambda: DESK_CLASSIFIER)
    data: dict = field(default_factory=lambda: dict(_DEFAULT_DATA))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seeds": list(self.seeds),
            "train": self.train.to_dict(),
            "classifier": self.classifier.to_dict(),
            "data": dict(self.data),
            "cells": [asdict(c) for c in self.cells],
        }


@dataclass
class SummaryRow:
    experiment: str
    cell: str
    mean_accuracy: float
    std_accuracy: float
    seeds: tuple


def build_experiment(
    name: str,
    seeds=(1, 2, 3),
    train: Optional[TrainConfig] = None,
    classifier: Optional[ClassifierConfig] = None,
    data: Optional[dict] = None,
) -> ExperimentSpec:
    """Instantiate one of the three named experiment grids."""
    if name == "ablation_thresholds":
        cells = [
            Cell(label="fixed", schedule={"kind": "fixed"}),
            Cell(label="adaptive_ascent", schedule={"kind": "adaptive_ascent"}),
            Cell(label="linear_decay", schedule={"kind": "linear_decay"}),
            Cell(label="sinusoidal_decay", schedule=dict(_SINE_CFG)),
        ]
    elif name == "pool_comparison":
        cells = [
            Cell(
                label=f"{pool}_lab{3 * n_per_class}",
                schedule=dict(_SINE_CFG),
                pool_kind=pool,
                n_labeled_per_class=n_per_class,
            )
            for pool in ("real_clean", "real_biased", "synthetic")
            for n_per_class in (10, 7, 5, 2)
        ]
    elif name == "baseline_vs_ssl":
        cells = [
            Cell(label="supervised_only", schedule=dict(_SINE_CFG), lambda_u=0.0),
            Cell(label="ssl_sinusoidal", schedule=dict(_SINE_CFG)),
        ]
    else:
        raise ConfigError(
            f"unknown experiment {name!r}; expected one of {EXPERIMENT_NAMES}"
        )
    spec = ExperimentSpec(name=name, cells=cells, seeds=tuple(seeds))
    if train is not None:
        spec.train = train
    if classifier is not None:
        spec.classifier = classifier
    if data is not None:
        spec.data.update(data)
    return spec


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def _run_dir(root: Path, spec_name: str, cell_label: str, seed: int) -> Path:
    return root / spec_name / cell_label / str(seed)


def _cell_bundle(spec: ExperimentSpec, cell: Cell, synthetic_pool_dir):
    if cell.pool_kind == "synthetic" and synthetic_pool_dir is None:
        raise ConfigError(
            f"cell {cell.label!r} needs a synthetic pool; generate one with "
            "`sinematch sample` and pass its directory"
        )
    if cell.pool_kind == "synthetic":
        pool_path = Path(synthetic_pool_dir)
        if not (pool_path / "pool_synthetic.tnsr").exists():
            raise ConfigError(
                f"no synthetic pool at {pool_path}; run `sinematch sample` first"
            )
    return make_bundle(
        n_labeled_per_class=cell.n_labeled_per_class,
        n_unlabeled=spec.data["n_unlabeled"],
        n_test_per_class=spec.data["n_test_per_class"],
        pool_kind=cell.pool_kind,
        seed=spec.data["data_seed"],
        synthetic_pool_dir=synthetic_pool_dir,
    )


def run_config_dict(spec: ExperimentSpec, cell: Cell, seed: int) -> dict:
    """The effective, re-runnable configuration of one (cell, seed) run."""
    train = dict(spec.train.to_dict(), seed=seed)
    if cell.lambda_u is not None:
        train["lambda_u"] = cell.lambda_u
    data = dict(spec.data)
    data["pool_kind"] = cell.pool_kind
    data["n_labeled_per_class"] = cell.n_labeled_per_class
    return {
        "experiment": spec.name,
        "cell": cell.label,
        "train": train,
        "classifier": spec.classifier.to_dict(),
        "schedule": dict(cell.schedule),
        "data": data,
    }


def run_experiment(
    spec: ExperimentSpec,
    runs_root,
    synthetic_pool_dir=None,
    progress=None,
) -> list:
    """Run every (cell, seed) pair, skipping finished ones; returns summaries."""
    root = Path(runs_root)
    exp_dir = root / spec.name
    exp_dir.mkdir(parents=True, exist_ok=True)
    with open(exp_dir / "experiment_config.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)

    for cell in spec.cells:
        bundle = None
        for seed in spec.seeds:
            rdir = _run_dir(root, spec.name, cell.label, seed)
            if (rdir / "done.marker").exists() and (rdir / "metrics.csv").exists():
                if progress:
                    progress(f"skip {spec.name}/{cell.label}/{seed} (done)")
                continue
            if bundle is None:
                bundle = _cell_bundle(spec, cell, synthetic_pool_dir)
            if progress:
                progress(f"run {spec.name}/{cell.label}/{seed}")
            cfg = run_config_dict(spec, cell, seed)
            rdir.mkdir(parents=True, exist_ok=True)
            with open(rdir / "config.json", "w", encoding="utf-8") as fh:
                json.dump(cfg, fh, indent=2, sort_keys=True)
            train_cfg = TrainConfig.from_dict(cfg["train"])
            schedule = schedule_from_config(cell.schedule, num_classes=bundle.num_classes)
            records, trainer = train_run(train_cfg, bundle, schedule, spec.classifier)
            write_metrics_csv(rdir / "metrics.csv", records)
            save_checkpoint(
                rdir / "checkpoint",
                trainer.ema.as_tensors(),
                spec.classifier.to_dict(),
                extra={"weights": "ema", "seed": seed, "cell": cell.label},
            )
            (rdir / "done.marker").write_text("ok\n", encoding="utf-8")
    return summarize_experiment(root, spec.name)


# ---------------------------------------------------------------------------
# Summaries and report files
# ---------------------------------------------------------------------------


def _final_accuracy(metrics_path: Path) -> float:
    records = read_metrics_csv(metrics_path)
    if not records:
        raise ValueError(f"{metrics_path} holds no records")
    return records[-1].test_accuracy


def summarize_experiment(runs_root, name: str) -> list:
    """Aggregate per-run CSVs into one SummaryRow per cell; writes summary.csv."""
    exp_dir = Path(runs_root) / name
    if not exp_dir.exists():
        raise FileNotFoundError(f"no experiment directory at {exp_dir}")
    rows = []
    cell_dirs = sorted(p for p in exp_dir.iterdir() if p.is_dir())
    for cell_dir in cell_dirs:
        accs, seeds = [], []
        for seed_dir in sorted(
            (p for p in cell_dir.iterdir() if p.is_dir()), key=lambda p: p.name
        ):
            metrics = seed_dir / "metrics.csv"
            if metrics.exists():
                accs.append(_final_accuracy(metrics))
                seeds.append(int(seed_dir.name))
        if accs:
            rows.append(
                SummaryRow(
                    experiment=name,
                    cell=cell_dir.name,
                    mean_accuracy=float(np.mean(accs)),
                    std_accuracy=float(np.std(accs)),
                    seeds=tuple(seeds),
                )
            )
    if not rows:
        raise ValueError(f"no completed runs under {exp_dir}")
    write_summary_csv(exp_dir / "summary.csv", rows)
    return rows


def write_summary_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["experiment", "cell", "mean_accuracy", "std_accuracy", "seeds"])
        for r in rows:
            writer.writerow(
                [
                    r.experiment,
                    r.cell,
                    repr(float(r.mean_accuracy)),
                    repr(float(r.std_accuracy)),
                    ";".join(str(s) for s in r.seeds),
                ]
            )


def read_summary_csv(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                SummaryRow(
                    experiment=row["experiment"],
                    cell=row["cell"],
                    mean_accuracy=float(row["mean_accuracy"]),
                    std_accuracy=float(row["std_accuracy"]),
                    seeds=tuple(int(s) for s in row["seeds"].split(";") if s),
                )
            )
    return rows


def report(runs_root, name: str) -> dict:
    """Write summary.csv plus threshold/mask-rate trace files for plotting.

    Traces are long-format CSVs (cell,iter,value), one line per logged
    iteration of each cell's first completed seed.
    """
    exp_dir = Path(runs_root) / name
    rows = summarize_experiment(runs_root, name)

    def first_seed_records(cell_label: str):
        cell_dir = exp_dir / cell_label
        for seed_dir in sorted(
            (p for p in cell_dir.iterdir() if p.is_dir()), key=lambda p: p.name
        ):
            metrics = seed_dir / "metrics.csv"
            if metrics.exists():
                return read_metrics_csv(metrics)
        return []

    thr_path = exp_dir / "threshold_trace.csv"
    mask_path = exp_dir / "mask_rate_trace.csv"
    with open(thr_path, "w", encoding="utf-8", newline="") as tfh, open(
        mask_path, "w", encoding="utf-8", newline=""
    ) as mfh:
        twr, mwr = csv.writer(tfh), csv.writer(mfh)
        twr.writerow(["cell", "iter", "threshold"])
        mwr.writerow(["cell", "iter", "mask_rate"])
        for row in rows:
            for rec in first_seed_records(row.cell):
                twr.writerow([row.cell, rec.iter, repr(float(rec.threshold))])
                mwr.writerow([row.cell, rec.iter, repr(float(rec.mask_rate))])
    return {
        "summary": exp_dir / "summary.csv",
        "threshold_trace": thr_path,
        "mask_rate_trace": mask_path,
        "rows": rows,
    }
