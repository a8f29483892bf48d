"""Teacher training, temperature-scaled distillation, and the adaptive
student-in-the-loop schedule that interleaves distillation with fresh
competition-mode synthesis."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .optim import SGD
from .nn import Model
from .data import LabeledBatch
from .inversion import ImageStore, SynthesisConfig, synthesize


def kd_loss(teacher_logits, student_logits: Tensor, tau: float) -> Tensor:
    """KL(softmax(t/tau) || softmax(s/tau)), natural log, averaged over the
    batch. Teacher logits are treated as constants."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.data.shape:
        raise ValueError(f"logit shapes differ: {t.shape} vs {student_logits.shape}")
    ts = t / tau
    ts = ts - ts.max(axis=1, keepdims=True)
    pt = np.exp(ts)
    pt /= pt.sum(axis=1, keepdims=True)
    log_pt = np.log(pt)
    ls = T.log_softmax(student_logits * Tensor(np.asarray(1.0 / tau)), axis=1)
    per_sample = T.tsum(Tensor(pt) * (Tensor(log_pt) - ls), axis=1)
    return T.tmean(per_sample)


def evaluate(model: Model, data: LabeledBatch, batch_size: int = 256) -> float:
    """Eval-mode top-1 accuracy."""
    correct = 0
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            logits = model.logits(Tensor(data.images[start:start + batch_size]))
            correct += int(np.sum(logits.data.argmax(axis=1) == data.labels[start:start + batch_size]))
    return correct / max(len(data), 1)


def train_teacher(model: Model, data: LabeledBatch, epochs: int, lr: float = 0.1,
                  batch_size: int = 64, momentum: float = 0.9, seed: int = 0,
                  test_data: LabeledBatch | None = None) -> float:
    """Plain cross-entropy training with SGD momentum; populates BN running
    stats and returns eval accuracy on test_data (or the training set)."""
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), lr=lr, momentum=momentum)
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, _ = model.forward(Tensor(data.images[idx]), mode="train")
            loss = T.cross_entropy(logits, data.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return evaluate(model, test_data if test_data is not None else data)


@dataclass
class DistillConfig:
    temperature: float = 3.0
    epochs: int = 30
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_decay_period: int = 100   # epochs between decays
    batch_size: int = 64
    adi_cadence: int = 50        # distillation steps between new adaptive batches
    seed: int = 0

    def validate(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.adi_cadence <= 0:
            raise ValueError("adi_cadence must be positive")


def _source_len(source) -> int:
    return len(source)


def _sample_images(source, rng: np.random.Generator, n: int) -> np.ndarray:
    if isinstance(source, ImageStore):
        return source.sample(rng, n)
    idx = rng.integers(0, len(source), n)
    return source.images[idx]


def _distill_step(teacher: Model, student: Model, images: np.ndarray,
                  opt: SGD, tau: float) -> float:
    with T.no_grad():
        t_logits = teacher.logits(Tensor(images)).data
    s_logits = student.logits(Tensor(images))
    loss = kd_loss(t_logits, s_logits, tau)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.data)


def distill(teacher: Model, student: Model, source, cfg: DistillConfig,
            test_data: LabeledBatch | None = None,
            metrics_path: str | None = None) -> list[float]:
    """Train the student to match the teacher on the image source. Only the
    pixels of the source are read; its labels (if any) never reach the loss.

    Returns the per-epoch accuracy curve when test_data is given, else the
    per-epoch mean KD loss.
    """
    cfg.validate()
    if _source_len(source) == 0:
        raise ValueError("empty image source")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(student.parameters(), lr=cfg.lr, momentum=0.9)
    steps_per_epoch = max(1, _source_len(source) // cfg.batch_size)
    curve = []
    writer = _metrics_writer(metrics_path)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * (cfg.lr_decay ** (epoch // cfg.lr_decay_period))
        losses = []
        for _ in range(steps_per_epoch):
            images = _sample_images(source, rng, cfg.batch_size)
            losses.append(_distill_step(teacher, student, images, opt, cfg.temperature))
        mean_loss = float(np.mean(losses))
        if test_data is not None:
            acc = evaluate(student, test_data)
            curve.append(acc)
            _emit(writer, epoch, "test", acc, mean_loss)
        else:
            curve.append(mean_loss)
            _emit(writer, epoch, "train", float("nan"), mean_loss)
    return curve


def adaptive_loop(teacher: Model, student: Model, syn_cfg: SynthesisConfig,
                  cfg: DistillConfig, store: ImageStore | None = None,
                  test_data: LabeledBatch | None = None,
                  metrics_path: str | None = None) -> ImageStore:
    """Alternate distillation with fresh synthesis against the current student
    every adi_cadence steps; each new batch is trained on immediately, then
    mixed uniformly with all prior batches."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    store = store if store is not None else ImageStore()
    opt = SGD(student.parameters(), lr=cfg.lr, momentum=0.9)
    writer = _metrics_writer(metrics_path)
    step = 0
    round_index = len(store.batches)
    total_steps = cfg.epochs * max(1, cfg.adi_cadence)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * (cfg.lr_decay ** (epoch // cfg.lr_decay_period))
        losses = []
        for _ in range(cfg.adi_cadence):
            if step % cfg.adi_cadence == 0:
                batch_cfg = SynthesisConfig(**{**_cfg_dict(syn_cfg),
                                               "seed": syn_cfg.seed + round_index})
                batch = synthesize(teacher, batch_cfg, student, round_index=round_index)
                store.append(batch)
                round_index += 1
                # fresh batch is consumed immediately
                losses.append(_distill_step(teacher, student, batch.pixels, opt, cfg.temperature))
            else:
                images = store.sample(rng, cfg.batch_size)
                losses.append(_distill_step(teacher, student, images, opt, cfg.temperature))
            step += 1
        if test_data is not None:
            _emit(writer, epoch, "test", evaluate(student, test_data), float(np.mean(losses)))
    return store


def _cfg_dict(cfg: SynthesisConfig) -> dict:
    from dataclasses import asdict
    d = asdict(cfg)
    d["clip"] = cfg.clip
    d["stats_override"] = cfg.stats_override
    d["targets"] = cfg.targets
    d["multires"] = cfg.multires
    return d


def _metrics_writer(path: str | None):
    if path is None:
        return None
    f = open(path, "w", newline="")
    w = csv.writer(f)
    w.writerow(["epoch", "split", "accuracy", "loss"])
    return (f, w)


def _emit(writer, epoch: int, split: str, acc: float, loss: float) -> None:
    if writer is None:
        return
    f, w = writer
    w.writerow([epoch, split, f"{acc:.6f}", f"{loss:.6f}"])
    f.flush()
