"""``unsq`` command line: every pipeline stage as a subcommand.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import DatasetError, generate_splits, load_dataset, synth_config_from_dict
from .distill import (MODES, DistillPlan, OptimizerSpec, SoftTargetSet, compute_class_weight,
                      evaluate, generate_soft_targets, train)
from .experiment import KINDS, STUDENT_VARIANTS, ExperimentSpec, replay, run_experiment
from .layers import UNIT_WEIGHTS
from .metrics import iou, predict_mask
from .unet import (CheckpointError, UnetConfig, build, count_params, enumerate_params,
                   load_checkpoint)

log = logging.getLogger("unsq")


def _csv_list(kind):
    def parse(text: str):
        try:
            items = [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from None
        if not items:
            raise argparse.ArgumentTypeError("expected a non-empty comma-separated list")
        return items
    return parse


def _positive(kind):
    def parse(text: str):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--iterations", type=int, default=2000, help="optimizer steps (default 2000)")
    g.add_argument("--eval-every", type=_positive(int), default=100)
    g.add_argument("--batch-size", type=_positive(int), default=4)
    g.add_argument("--optimizer", choices=["adam", "sgd-momentum"], default="adam")
    g.add_argument("--lr", type=_positive(float), default=1e-3, help="learning rate")
    g.add_argument("--seed", type=int, default=0, help="batch-order seed")
    g.add_argument("--model-seed", type=int, default=1, help="weight-initialization seed")


def _add_model_flags(p: argparse.ArgumentParser, default_depth: int) -> None:
    p.add_argument("--depth", type=_positive(int), default=default_depth,
                   help="channels in the first layer (C)")
    p.add_argument("--bn", action="store_true", help="batch norm on the contracting path")
    p.add_argument("--class-weights", action="store_true",
                   help="re-weight foreground by the background/foreground pixel ratio")
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unsq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"unsq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log evaluation points")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write synthetic train/test splits")
    p.add_argument("--out", required=True, help="root directory for train/ and test/")
    p.add_argument("--num-images", type=_positive(int), default=32)
    p.add_argument("--num-test", type=_positive(int), default=None,
                   help="test images (default: same as --num-images)")
    p.add_argument("--size", type=_positive(int), default=64, help="square image side")
    p.add_argument("--fraction", type=float, default=1 / 18.8, help="target foreground fraction")
    p.add_argument("--noise", type=float, default=None, help="additive noise std")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of SynthConfig fields (flags override it)")

    p = sub.add_parser("train", help="train a U-net on hard labels")
    p.add_argument("--data", required=True, help="directory holding train/ and test/")
    p.add_argument("--out", required=True, help="run directory (best.ckpt, report.csv, run.json)")
    _add_model_flags(p, 4)
    _add_training_flags(p)

    p = sub.add_parser("make-soft-targets", help="teacher probabilities at temperature T")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--data", required=True, help="split directory (e.g. data/train)")
    p.add_argument("--T", type=_positive(float), required=True, dest="T")
    p.add_argument("--out", required=True, help="output directory for the soft-target set")

    p = sub.add_parser("distill", help="train a student from soft targets")
    p.add_argument("--data", required=True, help="directory holding train/ and test/")
    p.add_argument("--soft", required=True, help="soft-target directory from make-soft-targets")
    p.add_argument("--out", required=True)
    _add_model_flags(p, 2)
    p.add_argument("--mode", choices=[m for m in MODES if m != "hard-only"], default="mixed")
    p.add_argument("--alpha", type=float, default=0.5, help="weight on the hard term (mixed)")
    p.add_argument("--switch", type=int, default=None, help="switch iteration (sequential modes)")
    p.add_argument("--soft-weights", choices=["class", "unit"], default="class",
                   help="class weights inside the soft term (default: same as hard term)")
    _add_training_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--data", required=True, help="split directory (e.g. data/test)")
    p.add_argument("--average", choices=["foreground", "classes"], default="foreground",
                   help="IoU averaging (default: pooled foreground)")

    p = sub.add_parser("count-params", help="print the parameter count of a U-net")
    p.add_argument("--depth", type=_positive(int), required=True)
    p.add_argument("--mode", choices=["plain", "paper-compat"], default="plain")
    p.add_argument("--bn", action="store_true", help="include contracting-path batch norm")

    p = sub.add_parser("grad-check", help="finite-difference battery over all layers")
    p.add_argument("--seeds", type=_positive(int), default=5)
    p.add_argument("--skip-end-to-end", action="store_true")

    p = sub.add_parser("experiment", help="run a table-style experiment grid")
    p.add_argument("--replay", help="experiment.json of a previous run to repeat")
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--data", help="directory holding train/ and test/")
    p.add_argument("--out")
    p.add_argument("--depths", type=_csv_list(int), default=None, help="e.g. 4,2")
    p.add_argument("--temperatures", type=_csv_list(float), default=None, help="e.g. 1,2,5,10")
    p.add_argument("--variants", type=_csv_list(str), default=None,
                   help=f"final-comparison students, subset of {','.join(STUDENT_VARIANTS)}")
    p.add_argument("--teacher", help="teacher checkpoint (distillation kinds)")
    p.add_argument("--student-depth", type=_positive(int), default=2)
    p.add_argument("--T", type=_positive(float), default=None, dest="T",
                   help="transfer temperature (final-comparison, single-run)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--soft-weights", choices=["class", "unit"], default="class")
    p.add_argument("--mode", choices=MODES, default="hard-only", help="single-run mode")
    p.add_argument("--switch", type=int, default=None)
    _add_model_flags(p, 2)
    _add_training_flags(p)
    p.add_argument("--jobs", type=_positive(int), default=1,
                   help="parallel grid cells (forced to 1 when UNSQ_DETERMINISTIC=1)")
    return parser


# --- commands ------------------------------------------------------------

def _optimizer(args) -> OptimizerSpec:
    return OptimizerSpec(args.optimizer, args.lr)


def cmd_gen_data(args) -> int:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    base.update(num_images=args.num_images, height=args.size, width=args.size,
                foreground_fraction=args.fraction, seed=args.seed)
    if args.noise is not None:
        base["noise_std"] = args.noise
    cfg = synth_config_from_dict(base)
    splits = generate_splits(cfg, args.out, num_test=args.num_test)
    for name, m in splits.items():
        print(f"{name}: {len(m)} images, foreground {m.foreground}, background {m.background}, "
              f"w_f {m.background / max(m.foreground, 1):.3f}, hash {m.content_hash[:12]}")
    return 0


def _splits(data):
    return load_dataset(Path(data) / "train"), load_dataset(Path(data) / "test")


def _report_summary(report) -> None:
    best = report.best_row
    print(f"best iteration {report.best_iteration}: test loss {best.test_loss:.5f}, "
          f"IoU {best.test_iou:.4f}")


def cmd_train(args) -> int:
    train_set, test_set = _splits(args.data)
    weights = compute_class_weight(train_set) if args.class_weights else UNIT_WEIGHTS
    plan = DistillPlan(class_weights=weights, optimizer=_optimizer(args),
                       max_iterations=args.iterations, eval_every=args.eval_every,
                       batch_size=args.batch_size, seed=args.seed)
    model = build(UnetConfig(args.depth, batch_norm_contracting=args.bn, dtype=args.dtype),
                  args.model_seed)
    _report_summary(train(model, plan, train_set, test_set, out_dir=args.out))
    print(f"checkpoint: {Path(args.out) / 'best.ckpt'}")
    return 0


def cmd_make_soft_targets(args) -> int:
    teacher = load_checkpoint(args.teacher)
    dataset = load_dataset(args.data)
    soft = generate_soft_targets(teacher, dataset, args.T, split=dataset.manifest.split)
    path = soft.save(args.out)
    print(f"{len(soft)} soft-target maps at T={args.T:g} -> {path} (digest {soft.digest()[:12]})")
    return 0


def cmd_distill(args) -> int:
    train_set, test_set = _splits(args.data)
    soft = SoftTargetSet.load(args.soft)
    weights = compute_class_weight(train_set) if args.class_weights else UNIT_WEIGHTS
    plan = DistillPlan(mode=args.mode, T_transfer=soft.temperature, mix_alpha=args.alpha,
                       class_weights=weights,
                       soft_weights=UNIT_WEIGHTS if args.soft_weights == "unit" else None,
                       optimizer=_optimizer(args), max_iterations=args.iterations,
                       eval_every=args.eval_every, switch_iteration=args.switch,
                       batch_size=args.batch_size, seed=args.seed, teacher_hash=soft.teacher_hash)
    if soft.dataset_hash is not None and soft.dataset_hash != train_set.manifest.content_hash:
        raise DatasetError("soft targets were generated from a different training split")
    model = build(UnetConfig(args.depth, batch_norm_contracting=args.bn, dtype=args.dtype),
                  args.model_seed)
    _report_summary(train(model, plan, train_set, test_set, soft, out_dir=args.out))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    dataset = load_dataset(args.data)
    res = evaluate(model, dataset)
    score = iou(predict_mask(model, dataset.images), dataset.masks, average=args.average)
    print(json.dumps({"model": str(args.model), "parameters": enumerate_params(model),
                      "iou": score, "iou_average": args.average, "test_loss": res.loss,
                      "test_loss_weighted": res.weighted_loss}, indent=2))
    return 0


def cmd_count_params(args) -> int:
    print(count_params(UnetConfig(args.depth, batch_norm_contracting=args.bn), args.mode))
    return 0


def cmd_grad_check(args) -> int:
    from .checks import run_battery

    results = run_battery(range(args.seeds), end_to_end=not args.skip_end_to_end)
    worst = 0.0
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:24s} seed {r.seed}  "
              f"max rel err {r.max_relative_error:.3e}  ({r.checked} coords)")
        worst = max(worst, r.max_relative_error)
    failed = [r for r in results if not r.passed]
    print(f"max relative error {worst:.3e}; {len(results) - len(failed)}/{len(results)} cases passed")
    return 1 if failed else 0


def cmd_experiment(args, parser) -> int:
    if args.replay:
        rows = replay(args.replay, args.out)
    else:
        missing = [f for f in ("kind", "data", "out") if getattr(args, f) is None]
        if missing:
            parser.error(f"experiment needs --{', --'.join(missing)} (or --replay)")
        overrides = dict(
            kind=args.kind, data=args.data, out=args.out, teacher=args.teacher,
            student_depth=args.student_depth, depth=args.depth, batch_norm=args.bn,
            class_weights=args.class_weights, mode=args.mode, mix_alpha=args.alpha,
            soft_weights=args.soft_weights, switch_iteration=args.switch,
            max_iterations=args.iterations, eval_every=args.eval_every,
            batch_size=args.batch_size, learning_rate=args.lr, optimizer=args.optimizer,
            seed=args.seed, model_seed=args.model_seed, jobs=args.jobs)
        for name in ("depths", "temperatures", "variants"):
            if getattr(args, name) is not None:
                overrides[name] = getattr(args, name)
        if args.T is not None:
            overrides["T_transfer"] = args.T
        rows = run_experiment(ExperimentSpec(**overrides))
    width = max(len(r.label) for r in rows)
    print(f"{'model':{width}s}  {'params':>10s}  {'IoU':>6s}  {'test loss':>9s}  best it")
    for r in rows:
        it = "" if r.best_iteration is None else r.best_iteration
        print(f"{r.label:{width}s}  {r.parameters:10d}  {r.iou:6.4f}  {r.test_loss:9.5f}  {it}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "make-soft-targets": cmd_make_soft_targets,
    "distill": cmd_distill, "eval": cmd_eval, "count-params": cmd_count_params,
    "grad-check": cmd_grad_check,
}


def check_combinations(args, parser) -> None:
    """Reject flag combinations argparse cannot express (exit code 2)."""
    mode = getattr(args, "mode", None)
    if args.command in ("distill", "experiment") and mode is not None:
        sequential = mode.startswith("sequential")
        if sequential and args.switch is None:
            parser.error(f"--mode {mode} needs --switch")
        if not sequential and args.switch is not None:
            parser.error("--switch only applies to sequential modes")
        if sequential and not 0 < args.switch < args.iterations:
            parser.error("--switch must lie strictly between 0 and --iterations")
        if not 0 < args.alpha < 1 and (mode == "mixed" or args.command == "experiment"):
            parser.error("--alpha must lie strictly between 0 and 1 for mixed distillation")
    if getattr(args, "iterations", 0) < 0:
        parser.error("--iterations must be >= 0")
    if args.command == "experiment" and args.replay and args.kind:
        parser.error("--replay and --kind are mutually exclusive")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    check_combinations(args, parser)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "experiment":
            return cmd_experiment(args, parser)
        return COMMANDS[args.command](args)
    except (DatasetError, CheckpointError, ValueError, OSError, FloatingPointError,
            RuntimeError) as e:
        print(f"unsq {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
