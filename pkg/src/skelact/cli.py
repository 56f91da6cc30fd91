"""Command-line entry point.

Subcommands: synth, gradcheck, train, eval, crossval.  Progress goes to
standard error; machine-readable results go to files.  Exit codes: 0
success, 1 validation error, 2 numerical failure, 3 I/O error.

Commands that write results record a ``run_manifest.json`` (resolved
config, seed, inputs, output directory, tool version, timestamp) before any
long-running work starts, so a run is reproducible from the manifest alone.
The config file is JSON with "model" and "train" sections; every flag has a
config-file equivalent and flags override file values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rngmod
from .datapipe import SUTURING_GESTURES, load_dataset
from .errors import NumericalError, SkelactError, ValidationError
from .evalharness import (
    confusion_figure,
    crossval,
    emit_report,
    evaluate_fold,
    write_predictions_csv,
)
from .graph import default_tool_skeleton, load_skeleton
from .model import ModelConfig, StgcnModel, build_adjacency_for, load_params, save_params
from .numerics import grad_check, ops
from .synth import VOCAB_FILENAME, synth_dataset
from .trainer import TrainConfig, VideoSegmentSource, train

OUT_ROOT_ENV = "SKELACT_OUT_ROOT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _resolve_out(args, command: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / command
    raise ValidationError(
        f"no output directory: pass --out or set {OUT_ROOT_ENV}")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ValidationError(f"{path}: unknown config section {sorted(unknown)[0]!r}")
    return cfg


def _apply_sets(cfg: dict, sets: list[str] | None) -> dict:
    for item in sets or []:
        if "=" not in item:
            raise ValidationError(f"--set needs SECTION.KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        if "." not in key:
            raise ValidationError(f"--set key must be SECTION.KEY, got {key!r}")
        section, name = key.split(".", 1)
        if section not in ("model", "train"):
            raise ValidationError(f"unknown config section {section!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg.setdefault(section, {})[name] = value
    return cfg


def _build_configs(args, num_classes: int | None, num_instances: int | None):
    cfg = _apply_sets(_load_config_file(getattr(args, "config", None)),
                      getattr(args, "set", None))
    model_d = dict(cfg.get("model", {}))
    train_d = dict(cfg.get("train", {}))
    if num_classes is not None:
        model_d.setdefault("num_classes", num_classes)
        if model_d["num_classes"] != num_classes:
            raise ValidationError(
                f"config sets num_classes={model_d['num_classes']} but the dataset "
                f"vocabulary has {num_classes} gestures")
    if num_instances is not None:
        model_d.setdefault("num_instances", num_instances)
        if model_d["num_instances"] != num_instances:
            raise ValidationError(
                f"config sets num_instances={model_d['num_instances']} but the data "
                f"carries {num_instances} tool instances")
    for flag in ("epochs", "batch_size", "base_lr", "weight_decay", "momentum", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            train_d[flag] = value
    return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)


def _skeleton_for(args):
    path = getattr(args, "skeleton", None)
    return load_skeleton(path) if path else default_tool_skeleton()


def _vocabulary_for(args, data_dir: Path | None):
    gestures = getattr(args, "gestures", None)
    if gestures:
        return tuple(g.strip() for g in gestures.split(",") if g.strip())
    if data_dir is not None:
        sidecar = data_dir / VOCAB_FILENAME
        if sidecar.exists():
            return tuple(sidecar.read_text(encoding="utf-8").split())
    return SUTURING_GESTURES


def _dataset_for(args):
    data = Path(args.data)
    data_dir = data if data.is_dir() else data.parent
    vocabulary = _vocabulary_for(args, data_dir)
    return load_dataset(data, vocabulary=vocabulary, index_base=args.index_base)


def _write_manifest(out_dir: Path, command: str, args, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "out_dir": str(out_dir),
    }
    manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    out = _resolve_out(args, "synth")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(
            f"{out} exists and is not empty; pass --force to write into it")
    _write_manifest(out, "synth", args, {
        "seed": args.seed,
        "config": {
            "classes": args.classes, "subjects": args.subjects,
            "trials": args.trials, "tools": args.tools,
            "frames_per_gesture": args.frames_per_gesture,
            "labeled_tail": args.labeled_tail,
        },
    })
    manifest = synth_dataset(
        out,
        classes=args.classes,
        subjects=args.subjects,
        trials=args.trials,
        seed=args.seed,
        tools=args.tools,
        frames_per_gesture=args.frames_per_gesture,
        labeled_tail=args.labeled_tail,
    )
    _progress(f"wrote {args.subjects * args.trials} videos under {out}")
    _progress(f"manifest: {manifest}")
    return 0


def cmd_gradcheck(args) -> int:
    model_cfg, _ = _build_configs(args, None, None)
    # the check needs a deterministic forward: dropout off, eval-mode norm
    model_cfg = replace(model_cfg, unit_dropout=0.0, head_dropout=0.0)
    skeleton = _skeleton_for(args)
    if args.corrupt_adjoint:
        ops._corrupt_relu_adjoint = True
    rng = rngmod.derived(args.seed or 0, 7)
    model = StgcnModel.create(model_cfg, skeleton, rng)
    n = 2
    batch = np.empty((n, model_cfg.in_channels, args.frames, model_cfg.num_joints,
                      model_cfg.num_instances))
    batch[:, :2] = rng.uniform(-1.0, 1.0, size=batch[:, :2].shape)
    batch[:, 2:] = rng.uniform(0.0, 1.0, size=batch[:, 2:].shape)
    labels = rng.integers(0, model_cfg.num_classes, size=n)

    def loss():
        return ops.softmax_cross_entropy(model.logits(batch, training=False), labels)

    started = time.perf_counter()
    report = grad_check(
        loss,
        list(model.params.items()),
        h=args.h,
        tol=args.tol,
        samples=args.samples,
        rng=rngmod.derived(args.seed or 0, 8),
    )
    _progress(report.summary())
    _progress(f"elapsed {time.perf_counter() - started:.1f}s")
    return 0 if report.passed else 1


def cmd_train(args) -> int:
    out = _resolve_out(args, "train")
    dataset = _dataset_for(args)
    sample = next(iter(dataset.videos.values()))
    model_cfg, train_cfg = _build_configs(
        args, dataset.num_classes, sample.sequence.num_tools)
    skeleton = _skeleton_for(args)
    adjacency = build_adjacency_for(model_cfg, skeleton)
    _write_manifest(out, "train", args, {
        "seed": train_cfg.seed,
        "data": str(args.data),
        "config": {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        "vocabulary": list(dataset.vocabulary),
    })
    source = VideoSegmentSource(
        dataset, window=train_cfg.window, step=train_cfg.step)
    state = train(
        source, train_cfg, model_cfg, adjacency,
        out_dir=out, resume_from=args.resume, log=_progress,
    )
    save_params(state.params, out / "model.params")
    _progress(
        f"final training accuracy {state.final_train_accuracy:.4f}; "
        f"parameters in {out / 'model.params'}")
    return 0


def cmd_eval(args) -> int:
    out = _resolve_out(args, "eval")
    dataset = _dataset_for(args)
    params = load_params(args.params)
    model_cfg = params.config
    skeleton = _skeleton_for(args)
    adjacency = build_adjacency_for(model_cfg, skeleton)
    model = StgcnModel(model_cfg, params, adjacency)
    if args.fold is not None:
        subjects = {e.subject_id for e in dataset.entries}
        if args.fold not in subjects:
            raise ValidationError(f"unknown subject {args.fold!r}")
        videos = [e.video_id for e in dataset.entries if e.subject_id == args.fold]
        subject = args.fold
    else:
        videos = [e.video_id for e in dataset.entries]
        subject = "all"
    _write_manifest(out, "eval", args, {
        "data": str(args.data),
        "params": str(args.params),
        "fold": args.fold,
        "config": {"model": model_cfg.to_dict()},
    })
    result = evaluate_fold(model, dataset, videos, subject,
                           window=args.window, step=args.step)
    (out / "fold_result.json").write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "predictions.csv", "w", newline="\n", encoding="utf-8") as fh:
        fh.write("subject,video_id,end_frame,true_label,pred_label\n")
        for p in result.predictions:
            fh.write(
                f"{subject},{p.video_id},{p.end_frame},"
                f"{dataset.vocabulary[p.true_label]},{dataset.vocabulary[p.pred_label]}\n")
    confusion_figure(result.confusion, dataset.vocabulary, subject,
                     out / f"confusion_{subject}.svg")
    _progress(f"fold {subject}: accuracy {result.accuracy:.4f}")
    print(f"accuracy: {100.0 * result.accuracy:.2f}%")
    return 0


def cmd_crossval(args) -> int:
    out = _resolve_out(args, "crossval")
    dataset = _dataset_for(args)
    sample = next(iter(dataset.videos.values()))
    model_cfg, train_cfg = _build_configs(
        args, dataset.num_classes, sample.sequence.num_tools)
    skeleton = _skeleton_for(args)
    adjacency = build_adjacency_for(model_cfg, skeleton)
    _write_manifest(out, "crossval", args, {
        "seed": train_cfg.seed,
        "data": str(args.data),
        "fold": args.fold,
        "jobs": args.jobs,
        "config": {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        "vocabulary": list(dataset.vocabulary),
    })
    report = crossval(
        dataset, train_cfg, model_cfg, adjacency,
        subjects=[args.fold] if args.fold else None,
        jobs=args.jobs,
        label_shuffle_seed=args.shuffle_labels,
        log=_progress,
    )
    emit_report(report, out)
    if report.average_accuracy is None:
        for f in report.failures:
            _progress(f"fold {f.subject_id} failed: {f.error}")
        print("average accuracy: withheld (fold failures)")
        return 2 if any("non-finite" in f.error for f in report.failures) else 1
    print(f"average accuracy: {100.0 * report.average_accuracy:.2f}%")
    print(f"chance baseline: {100.0 * report.chance_baseline:.2f}%")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="skelact",
                     description="Skeleton-based surgical gesture recognition")
    parser.add_argument("--version", action="version", version=f"skelact {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pose/transcript dataset")
    p.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/synth)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tools", type=int, default=2)
    p.add_argument("--frames-per-gesture", type=int, default=75)
    p.add_argument("--labeled-tail", type=int, default=9)
    p.add_argument("--force", action="store_true",
                   help="write into an existing non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck",
                       help="check the full model's gradients against finite differences")
    p.add_argument("--config", help="JSON config file with model/train sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--frames", type=int, default=90)
    # default seed picked so the fixed batch keeps every relu input away
    # from the finite-difference step (central differences need a smooth
    # neighborhood to be a valid oracle)
    p.add_argument("--seed", type=int, default=15)
    p.add_argument("--skeleton", help="skeleton spec file (default: 5-joint grasper)")
    p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    def common_data_flags(p):
        p.add_argument("--data", required=True,
                       help="dataset directory or manifest.csv path")
        p.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<cmd>)")
        p.add_argument("--gestures", help="comma-separated label vocabulary override")
        p.add_argument("--index-base", type=int, default=0,
                       help="transcript frame numbering base (0 or 1)")
        p.add_argument("--skeleton", help="skeleton spec file (default: 5-joint grasper)")

    p = sub.add_parser("train", help="train one model on every video in the manifest")
    common_data_flags(p)
    p.add_argument("--config", help="JSON config file with model/train sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--base-lr", type=float, dest="base_lr")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--momentum", type=float)
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters on a dataset")
    common_data_flags(p)
    p.add_argument("--params", required=True, help="parameter container file")
    p.add_argument("--fold", help="evaluate only this held-out subject's videos")
    p.add_argument("--window", type=int, default=90)
    p.add_argument("--step", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="leave-one-user-out cross-validation")
    common_data_flags(p)
    p.add_argument("--config", help="JSON config file with model/train sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--base-lr", type=float, dest="base_lr")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--momentum", type=float)
    p.add_argument("--fold", help="run only this held-out subject's fold")
    p.add_argument("--jobs", type=int, default=1,
                   help="train folds in parallel (deterministic per-fold seeds)")
    p.add_argument("--shuffle-labels", type=int, default=None, metavar="SEED",
                   help="shuffled-label control: permute training labels")
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"skelact: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"skelact: numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"skelact: i/o error: {exc}", file=sys.stderr)
        return 3
    except SkelactError as exc:
        print(f"skelact: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
