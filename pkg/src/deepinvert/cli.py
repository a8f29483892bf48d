"""Command-line pipeline: train a teacher, invert it into synthetic images,
distill a student, prune filters, and learn classes incrementally.

Every command seeds all randomness from --seed through named sub-streams and
writes a resolved-config snapshot next to its outputs, so identical args give
byte-identical artifacts. Exit codes: 0 ok, 2 usage error, 3 data error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import data as D
from . import tensor as T
from .nn import build_model, save_checkpoint, load_checkpoint, CheckpointError
from .inversion import (SynthesisConfig, ImageBatch, ImageStore, synthesize,
                        synthesize_multires, export_batch, DivergenceError)
from .distill import DistillConfig, distill, adaptive_loop, train_teacher, evaluate
from .pruning import PruneConfig, prune_loop
from .continual import ContinualTask, extend_head, continual_train, finetune_new_only

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

OUTPUT_ROOT_ENV = "DEEPINVERT_OUT"


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


def subseed(seed: int, name: str) -> int:
    """Named deterministic sub-stream of the run seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# -- datasets --------------------------------------------------------------------

_PREPROCESS = {"shapes": D.SHAPES_PREPROCESS, "mnist": D.MNIST_PREPROCESS,
               "cifar10": D.CIFAR10_PREPROCESS}


def _dataset(args, train: bool) -> D.LabeledBatch:
    try:
        if args.data == "shapes":
            seed = subseed(args.seed, "data") + (0 if train else 1)
            n = args.n_per_class if train else max(args.n_per_class // 4, 10)
            return D.gen_shapes(seed, n, classes=args.classes, size=args.size)
        if args.data_path is None:
            raise UsageError(f"--data {args.data} requires --data-path")
        if args.data == "mnist":
            return D.load_idx_mnist(args.data_path, "train" if train else "test")
        names = sorted(fn for fn in os.listdir(args.data_path)
                       if fn.endswith(".bin") and fn.startswith("data" if train else "test"))
        if not names:
            raise DataError(f"no {'train' if train else 'test'} .bin files in {args.data_path}")
        return D.load_cifar10_bin(args.data_path, files=names)
    except (OSError, ValueError) as e:
        if isinstance(e, (UsageError, DataError)):
            raise
        raise DataError(str(e)) from e


def _in_shape(args) -> tuple:
    if args.data == "shapes":
        return (3, args.size, args.size)
    return (1, 28, 28) if args.data == "mnist" else (3, 32, 32)


# -- output plumbing ----------------------------------------------------------------


def _out_dir(args, command: str) -> str:
    out = args.out or os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), command)
    os.makedirs(out, exist_ok=True)
    snapshot = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return out


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None


def _write_report(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


# -- commands -------------------------------------------------------------------------


def cmd_train_teacher(args) -> int:
    out = _out_dir(args, "train-teacher")
    train = _dataset(args, True)
    test = _dataset(args, False)
    model = build_model(args.arch, classes=train.class_count, in_shape=_in_shape(args),
                        width=args.width, seed=subseed(args.seed, "init"))
    acc = train_teacher(model, train, epochs=args.epochs, lr=args.lr,
                        batch_size=args.batch_size, seed=subseed(args.seed, "shuffle"),
                        test_data=test)
    ckpt = os.path.join(out, "teacher.ckpt")
    save_checkpoint(model, ckpt, metadata={"dataset": args.data, "test_acc": acc,
                                           "arch": args.arch})
    _write_report(os.path.join(out, "metrics.csv"),
                  [{"epoch": args.epochs, "split": "test", "accuracy": acc}],
                  ["epoch", "split", "accuracy"])
    print(f"saved {ckpt}")
    print(f"final test accuracy {acc:.4f}")
    return EXIT_OK


_MODE_MAP = {"noise": "noise_only", "deepdream": "deepdream",
             "di": "deepinversion", "adi": "adaptive"}


def _synthesis_config(args, batch: int, seed: int, clip) -> SynthesisConfig:
    multires = None
    if args.low_iters > 0:
        multires = {"low_res": args.low_res, "low_iters": args.low_iters,
                    "high_iters": args.iters}
    return SynthesisConfig(mode=_MODE_MAP[args.mode], alpha_tv=args.alpha_tv,
                           alpha_l2=args.alpha_l2, alpha_f=args.alpha_f,
                           alpha_c=args.alpha_c, lr=args.synth_lr, iterations=args.iters,
                           batch=batch, targets=None, jitter_px=args.jitter,
                           random_flip=not args.no_flip, clip=clip,
                           multires=multires, seed=seed)


def _synthesize_chunks(teacher, args, student, clip) -> ImageBatch:
    """Split the batch over workers; each chunk is an independent graph with
    its own seed sub-stream."""
    workers = max(1, args.workers)
    sizes = [len(r) for r in np.array_split(np.arange(args.batch), min(workers, args.batch))]

    def run(i_size):
        i, size = i_size
        cfg = _synthesis_config(args, size, subseed(args.seed, f"synth{i}"), clip)
        if cfg.multires:
            return synthesize_multires(teacher, cfg, student, round_index=i)
        return synthesize(teacher, cfg, student, round_index=i)

    jobs = list(enumerate(sizes))
    if workers == 1:
        parts = [run(j) for j in jobs]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    return ImageBatch(np.concatenate([p.pixels for p in parts]),
                      np.concatenate([p.targets for p in parts]),
                      provenance={"chunks": len(parts)},
                      soft_labels=np.concatenate([p.soft_labels for p in parts]))


def cmd_invert(args) -> int:
    if args.mode == "adi" and args.student is None:
        raise UsageError("--mode adi requires --student")
    out = _out_dir(args, "invert")
    teacher, _ = _load_model(args.teacher)
    student = None
    if args.student is not None:
        student, _ = _load_model(args.student)
        if student.class_count != teacher.class_count:
            raise DataError(f"student has {student.class_count} classes, teacher has {teacher.class_count}")
    clip = None if args.no_clip else _PREPROCESS[args.data]
    batch = _synthesize_chunks(teacher, args, student, clip)
    np.save(os.path.join(out, "pixels.npy"), batch.pixels)
    np.save(os.path.join(out, "targets.npy"), batch.targets)
    np.save(os.path.join(out, "soft_labels.npy"), batch.soft_labels)
    manifest = export_batch(batch, out, _PREPROCESS[args.data], teacher)
    top1 = float(np.mean(np.argmax(batch.soft_labels, axis=1) == batch.targets))
    print(f"saved {len(batch)} images to {out}")
    print(f"teacher top-1 on synthesized batch {top1:.4f}")
    print(f"manifest {manifest}")
    return EXIT_OK


def _image_source(args, teacher) -> ImageStore | D.LabeledBatch:
    if args.images is not None:
        try:
            pixels = np.load(os.path.join(args.images, "pixels.npy"))
            targets = np.load(os.path.join(args.images, "targets.npy"))
            soft = np.load(os.path.join(args.images, "soft_labels.npy"))
        except (OSError, ValueError) as e:
            raise DataError(f"cannot load image directory {args.images}: {e}") from e
        if soft.shape[1] != teacher.class_count:
            raise DataError(f"images carry {soft.shape[1]}-class soft labels, teacher has {teacher.class_count}")
        store = ImageStore()
        store.append(ImageBatch(pixels, targets, soft_labels=soft))
        return store
    return _dataset(args, True)


def cmd_distill(args) -> int:
    out = _out_dir(args, "distill")
    teacher, _ = _load_model(args.teacher)
    student = build_model(args.arch, classes=teacher.class_count, in_shape=teacher.in_shape,
                          width=args.width, seed=subseed(args.seed, "init"))
    test = _dataset(args, False)
    cfg = DistillConfig(temperature=args.temperature, epochs=args.epochs, lr=args.lr,
                        batch_size=args.batch_size, adi_cadence=args.adi_cadence,
                        seed=subseed(args.seed, "shuffle"))
    metrics = os.path.join(out, "metrics.csv")
    if args.adaptive:
        syn = _synthesis_config(args, args.batch, subseed(args.seed, "synth"),
                                None if args.no_clip else _PREPROCESS[args.data])
        syn.mode = "adaptive"
        store = _image_source(args, teacher) if args.images else None
        adaptive_loop(teacher, student, syn, cfg, store=store, test_data=test,
                      metrics_path=metrics)
    else:
        source = _image_source(args, teacher)
        distill(teacher, student, source, cfg, test_data=test, metrics_path=metrics)
    acc = evaluate(student, test)
    ckpt = os.path.join(out, "student.ckpt")
    save_checkpoint(student, ckpt, metadata={"teacher": os.path.basename(args.teacher),
                                             "test_acc": acc})
    print(f"saved {ckpt}")
    print(f"student test accuracy {acc:.4f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    out = _out_dir(args, "prune")
    teacher, _ = _load_model(args.teacher)
    student = teacher.clone()
    source = _image_source(args, teacher)
    test = _dataset(args, False)
    cfg = PruneConfig(eta=args.eta, filters_per_step=args.filters_per_step,
                      steps_between=args.steps_between,
                      target_fraction=args.target_filters,
                      latency_budget=args.latency_budget,
                      finetune_epochs=args.finetune_epochs, batch_size=args.batch_size,
                      lr=args.lr, temperature=args.temperature,
                      seed=subseed(args.seed, "prune"))
    rows = prune_loop(teacher, student, source, cfg, test_data=test,
                      report_path=os.path.join(out, "report.csv"))
    ckpt = os.path.join(out, "pruned.ckpt")
    acc = evaluate(student, test)
    save_checkpoint(student, ckpt, metadata={"test_acc": acc})
    last = rows[-1]
    print(f"saved {ckpt}")
    print(f"filters remaining {last['filters_remaining']}")
    print(f"estimated latency {last['est_latency_ms']:.6f} ms")
    print(f"pruned test accuracy {acc:.4f}")
    return EXIT_OK


def cmd_continual(args) -> int:
    out = _out_dir(args, "continual")
    old_model, _ = _load_model(args.old)
    co = old_model.class_count
    ck = args.new_classes
    total = co + ck
    if args.data != "shapes":
        raise UsageError("continual runs are defined over the shapes dataset")
    if total > len(D.SHAPE_CLASSES):
        raise DataError(f"{total} classes exceed the {len(D.SHAPE_CLASSES)} shape classes")
    args.classes = total
    train = _dataset(args, True)
    test = _dataset(args, False)
    new_train = train.subset(train.labels >= co)
    old_test = test.subset(test.labels < co)
    new_test = test.subset(test.labels >= co)

    new_model = extend_head(old_model, ck, np.random.default_rng(subseed(args.seed, "init")))

    replay = ImageStore()
    if args.replay == "di":
        cfg = SynthesisConfig(mode="deepinversion", iterations=args.replay_iters,
                              batch=args.replay_batch, clip=D.SHAPES_PREPROCESS,
                              seed=subseed(args.seed, "synth"))
        replay.append(synthesize(old_model, cfg))
    elif args.replay == "real":
        old_train = train.subset(train.labels < co)
        rng = np.random.default_rng(subseed(args.seed, "synth"))
        idx = rng.permutation(len(old_train))[:args.replay_batch]
        px = old_train.images[idx]
        with T.no_grad():
            soft = T.softmax(old_model.logits(px), axis=1).data.copy()
        replay.append(ImageBatch(px, old_train.labels[idx], soft_labels=soft))

    task = ContinualTask(old_model=old_model, new_model=new_model, replay=replay,
                         new_data=new_train, old_classes=co, new_classes=ck)
    seed = subseed(args.seed, "shuffle")
    if args.replay == "none":
        report = finetune_new_only(task, args.epochs, args.lr, args.batch_size,
                                   seed, old_test, new_test)
    else:
        report = continual_train(task, args.epochs, args.lr, args.batch_size,
                                 seed, old_test, new_test)
    ckpt = os.path.join(out, "extended.ckpt")
    save_checkpoint(new_model, ckpt, metadata={"replay": args.replay, **report})
    _write_report(os.path.join(out, "report.csv"), [report],
                  ["old_acc", "new_acc", "combined_acc"])
    print(f"saved {ckpt}")
    print(f"old accuracy {report['old_acc']:.4f}")
    print(f"new accuracy {report['new_acc']:.4f}")
    print(f"combined accuracy {report['combined_acc']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help=f"output dir (default ${OUTPUT_ROOT_ENV}/<command>)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--data", choices=("shapes", "mnist", "cifar10"), default="shapes")
    p.add_argument("--data-path", default=None)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--size", type=int, default=32, help="shapes image size")
    p.add_argument("--n-per-class", type=int, default=200)


def _add_synth(p):
    p.add_argument("--mode", choices=tuple(_MODE_MAP), default="di")
    p.add_argument("--synth-lr", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--alpha-tv", type=float, default=2.5e-5)
    p.add_argument("--alpha-l2", type=float, default=3e-8)
    p.add_argument("--alpha-f", type=float, default=1.0)
    p.add_argument("--alpha-c", type=float, default=10.0)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--low-res", type=int, default=16)
    p.add_argument("--low-iters", type=int, default=0, help="enable two-phase synthesis when > 0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepinvert",
                                     description="Invert CNN classifiers into synthetic images "
                                                 "and reuse them for distillation, pruning, and "
                                                 "continual learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train and checkpoint a classifier")
    _add_common(p)
    p.add_argument("--arch", required=True, choices=("vgg_small", "resnet_small", "mlp_bn"))
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--width", type=int, default=16)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("invert", help="synthesize class-conditional images from a teacher")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", default=None, help="required for --mode adi")
    _add_synth(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("distill", help="train a student against a teacher")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--images", default=None, help="directory produced by invert")
    p.add_argument("--arch", default="vgg_small", choices=("vgg_small", "resnet_small", "mlp_bn"))
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--temperature", type=float, default=3.0)
    p.add_argument("--adaptive", action="store_true", help="interleave adaptive synthesis")
    p.add_argument("--adi-cadence", type=int, default=50)
    _add_synth(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("prune", help="Taylor-prune a copy of the teacher")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--images", default=None, help="directory produced by invert")
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--target-filters", type=float, default=0.3,
                   help="fraction of prunable filters to remove")
    p.add_argument("--latency-budget", type=float, default=None)
    p.add_argument("--filters-per-step", type=int, default=4)
    p.add_argument("--steps-between", type=int, default=30)
    p.add_argument("--finetune-epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--temperature", type=float, default=5.0)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("continual", help="extend a classifier with new shape classes")
    _add_common(p)
    p.add_argument("--old", required=True, help="checkpoint trained on the old classes")
    p.add_argument("--new-classes", type=int, default=3)
    p.add_argument("--replay", choices=("none", "di", "real"), default="di")
    p.add_argument("--replay-batch", type=int, default=64)
    p.add_argument("--replay-iters", type=int, default=300)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_continual)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
