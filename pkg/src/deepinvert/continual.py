"""Data-free class-incremental learning with synthetic replay.

A frozen old model provides soft labels for replayed synthesized images; a
copy with an extended head trains on new-class data plus replay, with the
old-class slice of its predictions pulled toward the old model's outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .optim import SGD, clip_grad_norm
from .nn import Model, Linear, model_from_descriptor
from .data import LabeledBatch
from .inversion import ImageStore


def extend_head(old: Model, extra_classes: int, rng: np.random.Generator) -> Model:
    """Copy of the old model whose classifier head gains extra_classes rows;
    old-class rows are copied, new rows are freshly initialized."""
    desc = old.descriptor()
    head = desc["layers"][-1]
    if head["kind"] != "linear":
        raise ValueError("model must end in a linear head")
    head = dict(head)
    head["out"] = head["out"] + extra_classes
    desc = {**desc, "classes": old.class_count + extra_classes,
            "layers": desc["layers"][:-1] + [head]}
    new = model_from_descriptor(desc, rng=rng)
    st = old.state_dict()
    new_head: Linear = new.layers[-1]
    head_name = old.layers[-1].name
    w = new_head.weight.data.copy()
    b = new_head.bias.data.copy()
    w[:old.class_count] = st[f"{head_name}.weight"]
    b[:old.class_count] = st[f"{head_name}.bias"]
    st[f"{head_name}.weight"] = w
    st[f"{head_name}.bias"] = b
    new.load_state_dict(st)
    return new


@dataclass
class ContinualTask:
    old_model: Model            # p_o, frozen, heads over C_o
    new_model: Model            # p_k, trainable, heads over C_o + C_k
    replay: ImageStore          # synthesized images with stored p_o soft labels
    new_data: LabeledBatch      # labels already offset into [C_o, C_o + C_k)
    old_classes: int
    new_classes: int
    grad_clip: float = 0.1
    freeze_bn: bool = True

    def validate(self):
        if self.old_classes <= 0 or self.new_classes <= 0:
            raise ValueError("both class ranges must be non-empty")
        if self.new_model.class_count != self.old_classes + self.new_classes:
            raise ValueError(f"extended head has {self.new_model.class_count} outputs, "
                             f"expected {self.old_classes + self.new_classes}")


def _kl_rows(target_probs: np.ndarray, pred_probs: Tensor) -> Tensor:
    """Mean KL(target || pred) over rows; targets are constants, natural log."""
    mask = (target_probs > 0).astype(target_probs.dtype)
    safe_t = np.where(target_probs > 0, target_probs, 1.0)
    eps = 1e-12
    per = Tensor(mask * safe_t * np.log(safe_t)) - Tensor(target_probs) * T.log(pred_probs + Tensor(np.asarray(eps)))
    return T.tmean(T.tsum(per, axis=1))


def continual_loss(task: ContinualTask, replay_pixels: np.ndarray,
                   replay_soft: np.ndarray, new_x: np.ndarray,
                   new_y: np.ndarray) -> Tensor:
    """Replay distillation + new-class cross-entropy + old-class-slice
    distillation on the new images (the slice is renormalized over old classes)."""
    task.validate()
    if len(replay_pixels) != len(new_x):
        raise ValueError(f"replay batch ({len(replay_pixels)}) and new batch ({len(new_x)}) must be the same size")
    co = task.old_classes
    dt = task.new_model.parameters()[0].data.dtype

    # soft labels over old classes, zero-padded to the combined output space
    padded = np.zeros((len(replay_soft), co + task.new_classes), dtype=dt)
    padded[:, :co] = replay_soft

    pk_replay = T.softmax(task.new_model.logits(Tensor(replay_pixels)), axis=1)
    term_replay = _kl_rows(padded, pk_replay)

    new_logits = task.new_model.logits(Tensor(new_x))
    term_ce = T.cross_entropy(new_logits, new_y)

    with T.no_grad():
        po_new = T.softmax(task.old_model.logits(Tensor(new_x)), axis=1).data
    pk_new = T.softmax(new_logits, axis=1)
    old_slice = pk_new[:, :co]
    old_slice = old_slice / T.tsum(old_slice, axis=1, keepdims=True)
    term_old = _kl_rows(po_new.astype(dt), old_slice)

    return term_replay + term_ce + term_old


def finetune_new_only(task: ContinualTask, epochs: int, lr: float,
                      batch_size: int = 32, seed: int = 0,
                      old_test: LabeledBatch | None = None,
                      new_test: LabeledBatch | None = None) -> dict:
    """No-replay baseline: plain cross-entropy on the new classes with the same
    optimizer, clipping, BN freezing, and schedule as continual_train."""
    task.validate()
    rng = np.random.default_rng(seed)
    model = task.new_model
    bn_params = set()
    if task.freeze_bn:
        for bn in model.bn_layers():
            bn.frozen = True
            bn_params.add(id(bn.gamma))
            bn_params.add(id(bn.beta))
    params = [p for p in model.parameters() if id(p) not in bn_params]
    opt = SGD(params, lr=lr, momentum=0.9)
    n_new = len(task.new_data)
    steps_per_epoch = max(1, n_new // batch_size)
    drop_points = {int(epochs * f) for f in (1 / 3, 1 / 2, 2 / 3, 5 / 6)}
    cur_lr = lr
    for epoch in range(epochs):
        if epoch in drop_points:
            cur_lr *= 0.2
        opt.lr = cur_lr
        for _ in range(steps_per_epoch):
            nidx = rng.integers(0, n_new, batch_size)
            logits = model.logits(Tensor(task.new_data.images[nidx]))
            loss = T.cross_entropy(logits, task.new_data.labels[nidx])
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, task.grad_clip)
            opt.step()
    return _report(model, old_test, new_test)


def _report(model: Model, old_test: LabeledBatch | None,
            new_test: LabeledBatch | None) -> dict:
    from .distill import evaluate
    report = {}
    if old_test is not None:
        report["old_acc"] = evaluate(model, LabeledBatch(old_test.images, old_test.labels,
                                                         model.class_count))
    if new_test is not None:
        report["new_acc"] = evaluate(model, LabeledBatch(new_test.images, new_test.labels,
                                                         model.class_count))
    if "old_acc" in report and "new_acc" in report:
        report["combined_acc"] = 0.5 * (report["old_acc"] + report["new_acc"])
    return report


def continual_train(task: ContinualTask, epochs: int, lr: float,
                    batch_size: int = 32, seed: int = 0,
                    old_test: LabeledBatch | None = None,
                    new_test: LabeledBatch | None = None) -> dict:
    """SGD momentum 0.9 with global gradient clipping and frozen BN; the
    learning rate drops to 20% at 1/3, 1/2, 2/3, and 5/6 of the epochs."""
    task.validate()
    rng = np.random.default_rng(seed)
    model = task.new_model
    bn_params = set()
    if task.freeze_bn:
        for bn in model.bn_layers():
            bn.frozen = True
            bn_params.add(id(bn.gamma))
            bn_params.add(id(bn.beta))
    params = [p for p in model.parameters() if id(p) not in bn_params]
    opt = SGD(params, lr=lr, momentum=0.9)

    replay_px = task.replay.all_pixels()
    replay_soft = task.replay.all_soft_labels()
    n_new = len(task.new_data)
    steps_per_epoch = max(1, n_new // batch_size)
    drop_points = {int(epochs * f) for f in (1 / 3, 1 / 2, 2 / 3, 5 / 6)}
    cur_lr = lr
    old_flags = [p.requires_grad for p in task.old_model.parameters()]
    task.old_model.requires_grad_(False)
    try:
        for epoch in range(epochs):
            if epoch in drop_points:
                cur_lr *= 0.2
            opt.lr = cur_lr
            for _ in range(steps_per_epoch):
                ridx = rng.integers(0, len(replay_px), batch_size)
                nidx = rng.integers(0, n_new, batch_size)
                loss = continual_loss(task, replay_px[ridx], replay_soft[ridx],
                                      task.new_data.images[nidx], task.new_data.labels[nidx])
                opt.zero_grad()
                loss.backward()
                clip_grad_norm(params, task.grad_clip)
                opt.step()
    finally:
        for p, fl in zip(task.old_model.parameters(), old_flags):
            p.requires_grad = fl
    return _report(model, old_test, new_test)
