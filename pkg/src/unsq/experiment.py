"""Experiment grids that mirror the three result tables at desk scale.

``depth-sweep``        train plain U-nets of several first-layer widths from scratch
``temperature-sweep``  mixed distillation of a student at several temperatures
``final-comparison``   teacher vs. students trained soft-only, mixed and without distillation
``single-run``         one fully specified training run

Every run lives in ``<out>/<label>/`` (checkpoint, report CSV, run manifest).
The grid summary goes to ``<out>/metrics.csv`` and the full spec, with dataset
and teacher hashes, to ``<out>/experiment.json``, which :func:`replay` accepts.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import Dataset, load_dataset
from .distill import (DistillPlan, OptimizerSpec, compute_class_weight, evaluate,
                      generate_soft_targets, train)
from .layers import UNIT_WEIGHTS
from .unet import UnetConfig, build, enumerate_params, load_checkpoint, read_checkpoint

log = logging.getLogger(__name__)

KINDS = ("depth-sweep", "temperature-sweep", "final-comparison", "single-run")
STUDENT_VARIANTS = ("soft", "mixed", "none")
METRICS_COLUMNS = ["label", "depth", "parameters", "iou", "test_loss", "best_iteration",
                   "train_loss_hard", "train_loss_soft_t2", "temperature", "mode"]


class ExperimentError(ValueError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get("UNSQ_DETERMINISTIC", "0") not in ("", "0")


@dataclass
class ExperimentSpec:
    kind: str
    data: str  # directory holding train/ and test/ splits
    out: str
    depths: list[int] = field(default_factory=lambda: [4, 2])
    temperatures: list[float] = field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0])
    variants: list[str] = field(default_factory=lambda: list(STUDENT_VARIANTS))
    teacher: str | None = None
    student_depth: int = 2
    # single-run and shared training settings
    depth: int = 2
    batch_norm: bool = False
    class_weights: bool = False
    mode: str = "hard-only"
    T_transfer: float = 1.0
    mix_alpha: float = 0.5
    soft_weights: str = "class"  # "class" (same as the hard term) or "unit"
    switch_iteration: int | None = None
    max_iterations: int = 2000
    eval_every: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    model_seed: int = 1
    jobs: int = 1

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ExperimentError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "depth-sweep" and not self.depths:
            raise ExperimentError("depth-sweep needs a non-empty depth grid")
        if self.kind == "temperature-sweep" and not self.temperatures:
            raise ExperimentError("temperature-sweep needs a non-empty temperature grid")
        if self.kind == "final-comparison":
            if not self.variants:
                raise ExperimentError("final-comparison needs at least one student variant")
            bad = set(self.variants) - set(STUDENT_VARIANTS)
            if bad:
                raise ExperimentError(f"unknown student variants {sorted(bad)}")
        if any(c < 1 for c in self.depths) or self.depth < 1 or self.student_depth < 1:
            raise ExperimentError("depths must be positive")
        if any(t <= 0 for t in self.temperatures):
            raise ExperimentError("temperatures must be positive")
        if self.soft_weights not in ("class", "unit"):
            raise ExperimentError("soft_weights must be 'class' or 'unit'")
        if self.jobs < 1:
            raise ExperimentError("jobs must be >= 1")
        if self.needs_teacher:
            if not self.teacher:
                raise ExperimentError(f"{self.kind} needs a teacher checkpoint")
            if not Path(self.teacher).is_file():
                raise ExperimentError(f"teacher checkpoint not found: {self.teacher}")
        for split in ("train", "test"):
            if not (Path(self.data) / split / "manifest.json").is_file():
                raise ExperimentError(f"no {split} split under {self.data}")

    @property
    def needs_teacher(self) -> bool:
        if self.kind in ("temperature-sweep", "final-comparison"):
            return True
        return self.kind == "single-run" and self.mode != "hard-only"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown experiment fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRow:
    label: str
    depth: int
    parameters: int
    iou: float
    test_loss: float
    best_iteration: int | None
    train_loss_hard: float | None = None
    train_loss_soft_t2: float | None = None
    temperature: float | None = None
    mode: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"IoU {self.iou} outside [0, 1]")
        if self.parameters <= 0:
            raise ValueError("parameter count must be positive")

    def as_list(self) -> list:
        return [getattr(self, c) for c in METRICS_COLUMNS]


@dataclass
class Cell:
    """One training run of a grid, self-contained so it can run in a worker process."""

    label: str
    depth: int
    batch_norm: bool
    plan: dict
    temperature: float | None = None
    teacher: str | None = None


def _plan(spec: ExperimentSpec, train_set: Dataset, *, mode: str, weights: bool,
          T: float = 1.0, teacher_hash: str | None = None) -> DistillPlan:
    cw = compute_class_weight(train_set) if weights else UNIT_WEIGHTS
    soft_w = UNIT_WEIGHTS if spec.soft_weights == "unit" else None
    return DistillPlan(mode=mode, T_transfer=T, mix_alpha=spec.mix_alpha, class_weights=cw,
                       soft_weights=soft_w,
                       optimizer=OptimizerSpec(spec.optimizer, spec.learning_rate),
                       max_iterations=spec.max_iterations, eval_every=spec.eval_every,
                       switch_iteration=spec.switch_iteration if mode.startswith("sequential") else None,
                       batch_size=spec.batch_size, seed=spec.seed, teacher_hash=teacher_hash)


def plan_cells(spec: ExperimentSpec, train_set: Dataset) -> list[Cell]:
    teacher_hash = None
    if spec.needs_teacher:
        teacher_hash = load_checkpoint(spec.teacher).fingerprint()
    cells = []
    if spec.kind == "depth-sweep":
        for c in spec.depths:
            cells.append(Cell(f"{c}-Unet", c, False, _plan(spec, train_set, mode="hard-only",
                                                            weights=False).to_dict()))
    elif spec.kind == "temperature-sweep":
        # mixed distillation with class weights, no batch norm
        for T in spec.temperatures:
            plan = _plan(spec, train_set, mode="mixed", weights=True, T=T, teacher_hash=teacher_hash)
            cells.append(Cell(f"T={T:g}", spec.student_depth, False, plan.to_dict(), T, spec.teacher))
    elif spec.kind == "final-comparison":
        c = spec.student_depth
        modes = {"soft": "vanilla-soft", "mixed": "mixed", "none": "hard-only"}
        for v in spec.variants:
            T = spec.T_transfer if v != "none" else 1.0
            plan = _plan(spec, train_set, mode=modes[v], weights=True, T=T,
                         teacher_hash=teacher_hash if v != "none" else None)
            cells.append(Cell(f"{c}-Unet-modified-{v}", c, True, plan.to_dict(),
                              T if v != "none" else None, spec.teacher if v != "none" else None))
    else:
        plan = _plan(spec, train_set, mode=spec.mode, weights=spec.class_weights,
                     T=spec.T_transfer, teacher_hash=teacher_hash)
        cells.append(Cell(f"{spec.depth}-Unet-{spec.mode}", spec.depth, spec.batch_norm,
                          plan.to_dict(), spec.T_transfer if spec.needs_teacher else None,
                          spec.teacher))
    return cells


def run_cell(cell: Cell, data: str, out: str, model_seed: int) -> MetricsRow:
    train_set = load_dataset(Path(data) / "train")
    test_set = load_dataset(Path(data) / "test")
    plan = DistillPlan.from_dict(cell.plan)
    soft = None
    if plan.needs_soft_targets:
        teacher = load_checkpoint(cell.teacher)
        soft = generate_soft_targets(teacher, train_set, plan.T_transfer)
    model = build(UnetConfig(cell.depth, batch_norm_contracting=cell.batch_norm), model_seed)
    report = train(model, plan, train_set, test_set, soft, Path(out) / cell.label)
    best = report.best_row
    return MetricsRow(cell.label, cell.depth, enumerate_params(model), best.test_iou,
                      best.test_loss, report.best_iteration, best.train_loss_hard,
                      best.train_loss_soft_t2, cell.temperature, plan.mode)


def _teacher_row(spec: ExperimentSpec, test_set: Dataset) -> MetricsRow:
    teacher, meta = read_checkpoint(spec.teacher)
    res = evaluate(teacher, test_set)
    return MetricsRow(f"{teacher.config.start_channels}-Unet-teacher", teacher.config.start_channels,
                      enumerate_params(teacher), res.iou, res.loss, meta.get("iteration"))


def run_experiment(spec: ExperimentSpec) -> list[MetricsRow]:
    """Validate, run every grid cell, and write ``metrics.csv`` plus ``experiment.json``.

    All validation happens before the first training step.
    """
    spec.validate()
    train_set = load_dataset(Path(spec.data) / "train")
    test_set = load_dataset(Path(spec.data) / "test")
    cells = plan_cells(spec, train_set)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = 1 if deterministic_mode() else spec.jobs
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, c, spec.data, spec.out, spec.model_seed) for c in cells]
            rows = [f.result() for f in futures]
    else:
        rows = [run_cell(c, spec.data, spec.out, spec.model_seed) for c in cells]
    if spec.kind == "final-comparison":
        rows.insert(0, _teacher_row(spec, test_set))

    write_metrics(rows, out / "metrics.csv")
    doc = {"format": "unsq-experiment", "version": 1, "spec": spec.to_dict(),
           "dataset_hashes": {"train": train_set.manifest.content_hash,
                              "test": test_set.manifest.content_hash},
           "cells": [asdict(c) for c in cells]}
    if spec.needs_teacher:
        doc["teacher_hash"] = load_checkpoint(spec.teacher).fingerprint()
    (out / "experiment.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return rows


def write_metrics(rows: list[MetricsRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v)
                        for v in r.as_list()])
    return path


def replay(experiment_json, out=None) -> list[MetricsRow]:
    """Re-run an experiment from its ``experiment.json``, refusing changed inputs."""
    doc = json.loads(Path(experiment_json).read_text())
    spec = ExperimentSpec.from_dict(doc["spec"])
    if out is not None:
        spec.out = str(out)
    for split, expected in doc["dataset_hashes"].items():
        got = load_dataset(Path(spec.data) / split).manifest.content_hash
        if got != expected:
            raise ExperimentError(f"{split} split changed since the experiment was recorded")
    if "teacher_hash" in doc and load_checkpoint(spec.teacher).fingerprint() != doc["teacher_hash"]:
        raise ExperimentError("teacher checkpoint changed since the experiment was recorded")
    return run_experiment(spec)
