"""Training and distillation: optimizers, class weights, teacher soft targets,
loss schedules and the evaluation-tracking training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (Dataset, DatasetManifest, batch_order, read_soft_raster,
                   write_soft_raster)
from .layers import (UNIT_WEIGHTS, ClassWeights, cross_entropy_with_targets, hard_targets,
                     soft_cross_entropy, softmax_temperature, weighted_cross_entropy)
from .metrics import iou, mask_from_logits
from .tensor import Tape, Tensor, add, backward, no_grad, scalar_mul
from .unet import UnetModel, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("hard-only", "vanilla-soft", "mixed", "sequential-soft-then-hard",
         "sequential-hard-then-soft")


class TrainingDivergedError(RuntimeError):
    pass


class StaleSoftTargetsError(ValueError):
    pass


# --- optimizers ----------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9  # SGD momentum, or Adam beta1
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("momentum/beta values must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class OptimizerState:
    step: int = 0
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)


def init_optimizer_state(params: list[Tensor]) -> OptimizerState:
    return OptimizerState(0, [np.zeros_like(p.data) for p in params],
                          [np.zeros_like(p.data) for p in params])


def optimizer_step(params: list[Tensor], grads: list[np.ndarray], spec: OptimizerSpec,
                   state: OptimizerState) -> OptimizerState:
    """Update ``params`` in place and return the advanced state.

    SGD-momentum: ``v = mu*v + g; p -= lr*v``. Adam: bias-corrected moments.
    Weight decay is added to the gradient (L2).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.first:
        state = init_optimizer_state(params)
    state.step += 1
    lr, t = spec.learning_rate, state.step
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if spec.weight_decay:
            g = g + spec.weight_decay * p.data
        if spec.kind == "sgd-momentum":
            m *= spec.momentum
            m += g
            p.data -= lr * m
        else:
            b1, b2 = spec.momentum, spec.beta2
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= lr * mhat / (np.sqrt(vhat) + spec.eps)
    return state


# --- class weights -------------------------------------------------------

def compute_class_weight(dataset: DatasetManifest | Dataset) -> ClassWeights:
    """``w_f`` = background pixels / foreground pixels over the split; ``w_b`` = 1."""
    fg, bg = dataset.foreground, dataset.background
    if fg == 0:
        raise ValueError("dataset has no foreground pixels; the class weight is undefined")
    return ClassWeights(w_f=bg / fg, w_b=1.0)


# --- soft targets --------------------------------------------------------

@dataclass
class SoftTargetSet:
    probs: np.ndarray  # (n, 2, h, w)
    temperature: float
    teacher_hash: str
    split: str = "train"
    dataset_hash: str | None = None

    def __post_init__(self):
        if self.probs.ndim != 4 or self.probs.shape[1] != 2:
            raise ValueError(f"soft targets must be (n, 2, h, w), got {self.probs.shape}")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("soft targets are not normalized per pixel")

    def __len__(self) -> int:
        return self.probs.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.probs, dtype="<f8").tobytes())
        h.update(repr(float(self.temperature)).encode())
        h.update(self.teacher_hash.encode())
        return h.hexdigest()

    def save(self, directory) -> Path:
        """One ``soft_NNNN.soft`` raster per sample plus ``soft_targets.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i, p in enumerate(self.probs):
            name = f"soft_{i:04d}.soft"
            write_soft_raster(directory / name, p)
            names.append(name)
        meta = {"format": "unsq-soft-targets", "version": 1, "temperature": self.temperature,
                "teacher_hash": self.teacher_hash, "split": self.split,
                "dataset_hash": self.dataset_hash, "entries": names, "digest": self.digest()}
        path = directory / "soft_targets.json"
        path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> SoftTargetSet:
        path = Path(path)
        if path.is_dir():
            path = path / "soft_targets.json"
        meta = json.loads(path.read_text())
        probs = np.stack([read_soft_raster(path.parent / n) for n in meta["entries"]])
        out = cls(probs, float(meta["temperature"]), meta["teacher_hash"], meta["split"],
                  meta.get("dataset_hash"))
        if out.digest() != meta["digest"]:
            raise ValueError(f"{path}: soft-target digest mismatch")
        return out


def generate_soft_targets(teacher: UnetModel, dataset: Dataset, T: float,
                          batch_size: int = 8, split: str = "train") -> SoftTargetSet:
    """Teacher probabilities at temperature ``T`` for every sample (eval mode)."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    if dataset.images.shape[1] != teacher.config.in_channels:
        raise ValueError(f"teacher expects {teacher.config.in_channels} input channels, "
                         f"dataset has {dataset.images.shape[1]}")
    out = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            logits = teacher(dataset.images[start:start + batch_size], mode="eval")
            out.append(softmax_temperature(logits, T).data)
    ds_hash = dataset.manifest.content_hash if dataset.manifest is not None else None
    return SoftTargetSet(np.concatenate(out), float(T), teacher.fingerprint(), split, ds_hash)


# --- plan and loss -------------------------------------------------------

@dataclass
class DistillPlan:
    mode: str = "hard-only"
    T_transfer: float = 1.0
    mix_alpha: float = 0.5
    class_weights: ClassWeights = UNIT_WEIGHTS
    soft_weights: ClassWeights | None = None  # None: same as class_weights
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    max_iterations: int = 2000
    eval_every: int = 100
    switch_iteration: int | None = None
    batch_size: int = 4
    seed: int = 0
    teacher_hash: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.T_transfer <= 0:
            raise ValueError("T_transfer must be positive")
        if not 0 <= self.mix_alpha <= 1:
            raise ValueError("mix_alpha must lie in [0, 1]")
        if self.max_iterations < 0 or self.eval_every < 1 or self.batch_size < 1:
            raise ValueError("max_iterations >= 0, eval_every >= 1 and batch_size >= 1 required")
        if self.mode.startswith("sequential"):
            if self.switch_iteration is None or not 0 < self.switch_iteration < self.max_iterations:
                raise ValueError("sequential modes need 0 < switch_iteration < max_iterations")

    @property
    def needs_soft_targets(self) -> bool:
        return self.mode != "hard-only"

    @property
    def effective_soft_weights(self) -> ClassWeights:
        return self.soft_weights or self.class_weights

    def check_trainable(self) -> None:
        if self.mode == "mixed" and not 0 < self.mix_alpha < 1:
            raise ValueError("mixed training needs 0 < mix_alpha < 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = asdict(self.class_weights)
        d["soft_weights"] = asdict(self.soft_weights) if self.soft_weights else None
        d["optimizer"] = asdict(self.optimizer)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DistillPlan:
        d = dict(d)
        d["class_weights"] = ClassWeights(**d["class_weights"])
        d["soft_weights"] = ClassWeights(**d["soft_weights"]) if d.get("soft_weights") else None
        d["optimizer"] = OptimizerSpec(**d["optimizer"])
        return cls(**d)


def _soft_batch(plan: DistillPlan, soft_targets, indices) -> np.ndarray | None:
    if soft_targets is None:
        return None
    if isinstance(soft_targets, SoftTargetSet):
        check_soft_targets(plan, soft_targets)
        return soft_targets.probs if indices is None else soft_targets.probs[indices]
    return np.asarray(soft_targets)


def check_soft_targets(plan: DistillPlan, soft_targets: SoftTargetSet) -> None:
    if plan.teacher_hash is not None and soft_targets.teacher_hash != plan.teacher_hash:
        raise StaleSoftTargetsError(
            f"soft targets come from teacher {soft_targets.teacher_hash[:12]}, "
            f"plan expects {plan.teacher_hash[:12]}")
    if soft_targets.temperature != plan.T_transfer:
        raise StaleSoftTargetsError(
            f"soft targets were generated at T={soft_targets.temperature}, plan uses T={plan.T_transfer}")


def _active_term(plan: DistillPlan, iteration: int) -> str:
    if plan.mode == "sequential-soft-then-hard":
        return "soft" if iteration < plan.switch_iteration else "hard"
    if plan.mode == "sequential-hard-then-soft":
        return "hard" if iteration < plan.switch_iteration else "soft"
    return {"hard-only": "hard", "vanilla-soft": "soft", "mixed": "mixed"}[plan.mode]


def training_loss(plan: DistillPlan, student_logits: Tensor, hard_mask, soft_targets=None,
                  iteration: int = 0, indices=None) -> tuple[Tensor, dict[str, float]]:
    """Objective for one step and a breakdown of its terms.

    ``hard`` is the class-weighted CE at T=1; ``soft`` the CE against teacher
    probabilities at ``T_transfer``; ``soft_scaled`` is ``T**2 * soft``, the
    term actually optimized so gradient scale does not shrink with T.
    """
    term = _active_term(plan, iteration)
    T = plan.T_transfer
    probs = _soft_batch(plan, soft_targets, indices)
    if term != "hard" and probs is None:
        raise ValueError(f"mode {plan.mode!r} needs soft targets")

    hard = weighted_cross_entropy(student_logits, hard_mask, plan.class_weights)
    breakdown = {"hard": hard.item()}
    if plan.class_weights == UNIT_WEIGHTS:
        breakdown["hard_unweighted"] = breakdown["hard"]
    else:
        with no_grad():
            breakdown["hard_unweighted"] = weighted_cross_entropy(student_logits, hard_mask).item()
    soft_scaled = None
    if probs is not None:
        soft = soft_cross_entropy(student_logits, probs, T, plan.effective_soft_weights)
        soft_scaled = scalar_mul(soft, T * T)
        breakdown["soft"] = soft.item()
        breakdown["soft_scaled"] = soft_scaled.item()

    if term == "hard":
        loss = hard
    elif term == "soft":
        loss = soft_scaled
    else:
        a = plan.mix_alpha
        loss = add(scalar_mul(hard, a), scalar_mul(soft_scaled, 1.0 - a))
    breakdown["total"] = loss.item()
    return loss, breakdown


# --- evaluation ----------------------------------------------------------

@dataclass
class EvalResult:
    loss: float  # unweighted CE at T=1
    weighted_loss: float
    iou: float


def evaluate(model: UnetModel, dataset: Dataset, weights: ClassWeights = UNIT_WEIGHTS,
             batch_size: int = 8) -> EvalResult:
    """Pixel-mean losses and pooled foreground IoU over a split, eval mode, T = 1."""
    total, weighted, npix = 0.0, 0.0, 0
    preds = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size]
            masks = dataset.masks[start:start + batch_size]
            logits = model(images, mode="eval")
            targets = hard_targets(masks).astype(logits.dtype)
            count = masks.size
            total += cross_entropy_with_targets(logits, targets, 1.0).item() * count
            weighted += cross_entropy_with_targets(logits, targets, 1.0, weights).item() * count
            npix += count
            preds.append(mask_from_logits(logits.data))
    return EvalResult(total / npix, weighted / npix, iou(np.concatenate(preds), dataset.masks))


# --- training loop -------------------------------------------------------

REPORT_COLUMNS = ["iteration", "test_loss", "train_loss_hard", "train_loss_soft",
                  "train_loss_soft_t2", "train_loss_hard_unweighted", "train_loss_total",
                  "test_loss_unweighted", "test_iou"]


@dataclass
class EvalRow:
    iteration: int
    test_loss: float
    train_loss_hard: float | None
    train_loss_soft: float | None
    train_loss_soft_t2: float | None
    train_loss_hard_unweighted: float | None
    train_loss_total: float | None
    test_loss_unweighted: float
    test_iou: float

    def as_list(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class TrainReport:
    rows: list[EvalRow]
    best_iteration: int
    best_test_loss: float
    plan: dict
    model_seed: int | None
    data_seed: int
    checkpoint: str | None = None
    wall_clock: float = 0.0
    teacher_hash: str | None = None

    @property
    def best_row(self) -> EvalRow:
        return next(r for r in self.rows if r.iteration == self.best_iteration)

    def write_csv(self, path) -> Path:
        """One row per evaluation point, columns as in ``REPORT_COLUMNS``; blank = not measured."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for row in self.rows:
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v)
                            for v in row.as_list()])
        return path

    def manifest(self) -> dict:
        return {"plan": self.plan, "model_seed": self.model_seed, "data_seed": self.data_seed,
                "best_iteration": self.best_iteration, "best_test_loss": self.best_test_loss,
                "checkpoint": self.checkpoint, "teacher_hash": self.teacher_hash,
                "wall_clock_seconds": self.wall_clock}


def _mean(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


def train(student: UnetModel, plan: DistillPlan, train_set: Dataset, test_set: Dataset,
          soft_targets: SoftTargetSet | None = None, out_dir=None) -> TrainReport:
    """Minibatch training with periodic test evaluation.

    The test split is scored every ``plan.eval_every`` iterations (and at 0 and
    the end) with the hard CE at T=1 under ``plan.class_weights``, the same
    hard term the student trains on; the parameters with the lowest
    test loss are restored into ``student`` on return and, if ``out_dir`` is
    given, saved to ``out_dir/best.ckpt`` next to ``report.csv`` and ``run.json``.
    """
    plan.check_trainable()
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("training and test splits must be non-empty")
    if plan.needs_soft_targets:
        if soft_targets is None:
            raise ValueError(f"mode {plan.mode!r} needs soft targets")
        check_soft_targets(plan, soft_targets)
        if len(soft_targets) != len(train_set):
            raise ValueError("soft targets and training split differ in length")
    else:
        soft_targets = None

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    params = student.parameters()
    state = init_optimizer_state(params)
    rows: list[EvalRow] = []
    best: tuple[float, int, dict] | None = None
    acc: dict[str, list[float]] = {"hard": [], "soft": [], "soft_scaled": [],
                                   "hard_unweighted": [], "total": []}

    def record_eval(iteration: int) -> None:
        nonlocal best
        res = evaluate(student, test_set, plan.class_weights)
        # weighted students would otherwise be selected at all-background states
        test_loss = res.weighted_loss
        rows.append(EvalRow(iteration, test_loss, _mean(acc["hard"]), _mean(acc["soft"]),
                            _mean(acc["soft_scaled"]), _mean(acc["hard_unweighted"]),
                            _mean(acc["total"]), res.loss, res.iou))
        for v in acc.values():
            v.clear()
        log.info("iter %d test_loss %.5f iou %.4f", iteration, test_loss, res.iou)
        if best is None or test_loss < best[0]:
            best = (test_loss, iteration, student.state_dict())
            if out is not None:
                save_checkpoint(student, out / "best.ckpt",
                                metadata={"iteration": iteration, "test_loss": test_loss})

    record_eval(0)
    n = len(train_set)
    epoch, order, pos = 0, batch_order(n, plan.seed, 0, True), 0
    for it in range(1, plan.max_iterations + 1):
        if pos >= n:
            epoch += 1
            order, pos = batch_order(n, plan.seed, epoch, True), 0
        idx = order[pos:pos + plan.batch_size]
        pos += plan.batch_size

        student.zero_grad()
        with Tape() as tape:
            logits = student(train_set.images[idx], mode="train")
            loss, parts = training_loss(plan, logits, train_set.masks[idx], soft_targets, it - 1, idx)
        if not np.isfinite(parts["total"]):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it} (learning rate {plan.optimizer.learning_rate})")
        grads = backward(tape, loss)
        state = optimizer_step(params, [grads[p].data for p in params], plan.optimizer, state)
        for k in acc:
            if k in parts:
                acc[k].append(parts[k])
        if it % plan.eval_every == 0 or it == plan.max_iterations:
            record_eval(it)

    best_loss, best_it, best_state = best
    student.load_state_dict(best_state)
    report = TrainReport(rows, best_it, best_loss, plan.to_dict(), student.seed, plan.seed,
                         str(out / "best.ckpt") if out is not None else None,
                         time.perf_counter() - started,
                         soft_targets.teacher_hash if soft_targets is not None else None)
    if out is not None:
        report.write_csv(out / "report.csv")
        (out / "run.json").write_text(json.dumps(report.manifest(), indent=2, sort_keys=True) + "\n")
    return report
