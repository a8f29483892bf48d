"""Label-free Taylor filter pruning with a latency lookup-table cost model.

Per-filter gates (fixed at 1) are multiplied onto batch-norm outputs; the
squared product of gate gradient and gate value, summed over mini-batches,
estimates the loss increase from removing the filter. A synthetic cost model
stands in for hardware profiling: per-conv costs live in a LUT keyed by
(c_in, c_out, kernel, stride, fmap), and network latency is the sum of conv
lookups. Rankings combine both signals; lowest-ranked groups are removed
structurally (weights physically deleted, consumers rewired).

Filters whose outputs meet at a skip-add share one channel space and are
gated and removed jointly across all producing convs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .optim import SGD
from .nn import Model, Conv2d, BatchNorm, Linear, ReLU, MaxPool, GlobalAvgPool, Flatten, ResidualBlock
from .data import LabeledBatch
from .distill import kd_loss
from .inversion import ImageStore


# -- channel spaces ------------------------------------------------------------


@dataclass
class ChannelSpace:
    """A set of channels tied together by the network structure."""
    index: int
    size: int
    producers: list = field(default_factory=list)   # (conv, bn or None)
    consumers: list = field(default_factory=list)   # ("conv", conv) | ("linear", linear)
    prunable: bool = True
    gate: Tensor | None = None


class PrunePlan:
    def __init__(self, model: Model):
        self.model = model
        self.spaces: list[ChannelSpace] = []
        self._build()

    def _new_space(self, size: int, prunable: bool = True) -> ChannelSpace:
        sp = ChannelSpace(len(self.spaces), size, prunable=prunable)
        self.spaces.append(sp)
        return sp

    def _build(self) -> None:
        model = self.model
        current = self._new_space(model.in_shape[0], prunable=False)
        pending_conv: Conv2d | None = None

        def close_pending(bn: BatchNorm | None):
            nonlocal pending_conv, current
            if pending_conv is not None:
                current.producers.append((pending_conv, bn))
                pending_conv = None

        for layer in model.layers:
            if isinstance(layer, Conv2d):
                close_pending(None)
                current.consumers.append(("conv", layer))
                current = self._new_space(layer.out_ch)
                pending_conv = layer
            elif isinstance(layer, BatchNorm):
                close_pending(layer)
            elif isinstance(layer, (ReLU, MaxPool, GlobalAvgPool)):
                close_pending(None)
            elif isinstance(layer, Flatten):
                close_pending(None)
                current.prunable = False  # flattened features are not per-channel
            elif isinstance(layer, Linear):
                close_pending(None)
                current.consumers.append(("linear", layer))
                current = self._new_space(layer.out_f, prunable=False)
            elif isinstance(layer, ResidualBlock):
                close_pending(None)
                current.consumers.append(("conv", layer.conv1))
                mid = self._new_space(layer.conv1.out_ch)
                mid.producers.append((layer.conv1, layer.bn1))
                mid.consumers.append(("conv", layer.conv2))
                if layer.short_conv is not None:
                    current.consumers.append(("conv", layer.short_conv))
                    out = self._new_space(layer.conv2.out_ch)
                    out.producers.append((layer.conv2, layer.bn2))
                    out.producers.append((layer.short_conv, layer.short_bn))
                    current = out
                else:
                    # identity shortcut: conv2 writes into the incoming space
                    current.producers.append((layer.conv2, layer.bn2))
            else:
                raise ValueError(f"cannot build a pruning plan over layer {type(layer).__name__}")
        close_pending(None)
        current.prunable = False  # classifier outputs
        # a space with no conv producers cannot be restructured
        for sp in self.spaces:
            if not sp.producers:
                sp.prunable = False

    def prunable_spaces(self) -> list[ChannelSpace]:
        return [sp for sp in self.spaces if sp.prunable]

    def total_prunable_filters(self) -> int:
        return sum(sp.size for sp in self.prunable_spaces())


def insert_gates(plan: PrunePlan) -> list[Tensor]:
    """Attach a shared all-ones gate to every prunable space; the gate scales
    each producer's normalized output so zeroing an entry silences the channel
    everywhere downstream."""
    gates = []
    for sp in plan.prunable_spaces():
        gate = Tensor(np.ones(sp.size), requires_grad=True)
        sp.gate = gate
        for conv, bn in sp.producers:
            target = bn if bn is not None else conv
            target.gate = gate
        gates.append(gate)
    if not gates:
        raise ValueError("model has no prunable filters")
    return gates


def remove_gates(plan: PrunePlan) -> None:
    for sp in plan.spaces:
        sp.gate = None
        for conv, bn in sp.producers:
            conv.gate = None
            if bn is not None:
                bn.gate = None


# -- Taylor importance -----------------------------------------------------------


@dataclass
class ImportanceAccumulator:
    """Running per-channel sums of (gate_grad * gate_value)^2, grouped into
    consecutive blocks of group_size for ranking."""
    plan: PrunePlan
    group_size: int = 2
    sums: dict = field(default_factory=dict)  # space index -> per-channel array
    batches_seen: int = 0

    def __post_init__(self):
        self.reset()

    def reset(self) -> None:
        self.sums = {sp.index: np.zeros(sp.size, dtype=np.float64)
                     for sp in self.plan.prunable_spaces()}
        self.batches_seen = 0

    def accumulate(self) -> None:
        for sp in self.plan.prunable_spaces():
            g = sp.gate.grad
            if g is None:
                raise RuntimeError("gate has no gradient; run backward before accumulating")
            self.sums[sp.index] += (g.astype(np.float64) * sp.gate.data.astype(np.float64)) ** 2
        self.batches_seen += 1

    def group_scores(self) -> list[tuple[float, int, int]]:
        """(score, space index, first channel) per group, tie-broken by position."""
        out = []
        for sp in self.plan.prunable_spaces():
            s = self.sums[sp.index]
            for start in range(0, sp.size - sp.size % self.group_size, self.group_size):
                out.append((float(s[start:start + self.group_size].sum()), sp.index, start))
        return out


def taylor_importance(model: Model, plan: PrunePlan, batches, loss_kind: str,
                      teacher: Model | None = None, tau: float = 1.0,
                      group_size: int = 2) -> ImportanceAccumulator:
    """Accumulate gate-gradient importance over an iterable of batches.

    loss_kind 'ce_labels' expects (images, labels) pairs; 'kl_teacher' expects
    plain image arrays and a frozen teacher.
    """
    if loss_kind not in ("ce_labels", "kl_teacher"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "kl_teacher" and teacher is None:
        raise ValueError("kl_teacher importance needs a teacher model")
    acc = ImportanceAccumulator(plan, group_size)
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    try:
        for item in batches:
            if loss_kind == "ce_labels":
                images, labels = item
                logits = model.logits(Tensor(images))
                loss = T.cross_entropy(logits, labels)
            else:
                images = item
                with T.no_grad():
                    t_logits = teacher.logits(Tensor(images)).data
                loss = kd_loss(t_logits, model.logits(Tensor(images)), tau)
            for sp in plan.prunable_spaces():
                sp.gate.grad = None
            loss.backward()
            acc.accumulate()
    finally:
        for p, fl in zip(model.parameters(), flags):
            p.requires_grad = fl
    return acc


# -- latency LUT -------------------------------------------------------------------


def default_cost_model(c_in: int, c_out: int, kernel: int, stride: int, fmap: int) -> float:
    """Synthetic per-conv cost in ms: fixed overhead plus work proportional to
    MACs (c_in * c_out * k^2 * fmap^2 / stride^2). Version 1."""
    return 1e-3 + 1e-6 * c_in * c_out * kernel * kernel * fmap * fmap / (stride * stride)


COST_MODEL_VERSION = 1


class LatencyLUT:
    def __init__(self, entries: dict | None = None, version: int = COST_MODEL_VERSION):
        self.entries = entries or {}
        self.version = version

    def cost(self, key: tuple, context: str = "") -> float:
        try:
            return self.entries[key]
        except KeyError:
            raise KeyError(f"latency LUT has no entry for key {key}"
                           + (f" ({context})" if context else "")) from None

    def __len__(self):
        return len(self.entries)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(f"# latency LUT v{self.version}\n")
            for (ci, co, k, s, fm), cost in sorted(self.entries.items()):
                f.write(f"{ci} {co} {k} {s} {fm} {cost!r}\n")

    @classmethod
    def load(cls, path: str) -> "LatencyLUT":
        entries = {}
        version = COST_MODEL_VERSION
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line.startswith("#"):
                    version = int(line.rsplit("v", 1)[1])
                    continue
                if not line:
                    continue
                ci, co, k, s, fm, cost = line.split()
                entries[(int(ci), int(co), int(k), int(s), int(fm))] = float(cost)
        return cls(entries, version)


def _trace_convs(model: Model) -> list[Conv2d]:
    """All convs in forward order, with their input feature-map size recorded."""
    c, h, w = model.in_shape
    with T.no_grad():
        model.forward(Tensor(np.zeros((1, c, h, w), dtype=np.float32)))
    convs = []
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            convs.append(layer)
        elif isinstance(layer, ResidualBlock):
            convs.extend(cv for cv in (layer.conv1, layer.conv2, layer.short_conv) if cv is not None)
    return convs


def build_lut(model: Model, cost_model=default_cost_model) -> LatencyLUT:
    """Cover every (c_in', c_out') at or below each conv's original channel
    counts, at the conv's fixed kernel/stride/fmap."""
    entries = {}
    for conv in _trace_convs(model):
        fmap = conv.last_fmap
        for ci in range(1, conv.in_ch + 1):
            for co in range(1, conv.out_ch + 1):
                entries[(ci, co, conv.k, conv.stride, fmap)] = cost_model(ci, co, conv.k, conv.stride, fmap)
    return LatencyLUT(entries)


def estimate_latency(model: Model, lut: LatencyLUT) -> float:
    """Sum of LUT costs over conv operators; everything else costs 0."""
    total = 0.0
    for conv in _trace_convs(model):
        key = (conv.in_ch, conv.out_ch, conv.k, conv.stride, conv.last_fmap)
        total += lut.cost(key, context=f"conv layer {conv.name or '?'}")
    return total


def _group_latency_delta(plan: PrunePlan, space: ChannelSpace, n_removed: int,
                         lut: LatencyLUT) -> float:
    """Latency change from removing n channels of the space (always <= 0)."""
    delta = 0.0
    for conv, _ in space.producers:
        key_old = (conv.in_ch, conv.out_ch, conv.k, conv.stride, conv.last_fmap)
        key_new = (conv.in_ch, conv.out_ch - n_removed, conv.k, conv.stride, conv.last_fmap)
        delta += lut.cost(key_new, "reduced producer") - lut.cost(key_old, "producer")
    for kind, consumer in space.consumers:
        if kind != "conv":
            continue
        key_old = (consumer.in_ch, consumer.out_ch, consumer.k, consumer.stride, consumer.last_fmap)
        key_new = (consumer.in_ch - n_removed, consumer.out_ch, consumer.k, consumer.stride, consumer.last_fmap)
        delta += lut.cost(key_new, "reduced consumer") - lut.cost(key_old, "consumer")
    return delta


def combined_importance(acc: ImportanceAccumulator, plan: PrunePlan,
                        lut: LatencyLUT | None, eta: float) -> list[tuple[float, int, int]]:
    """Groups ranked ascending by error importance plus eta times the (negative)
    latency delta of removing them; lowest come out first."""
    scored = []
    for err, space_idx, start in acc.group_scores():
        if plan.spaces[space_idx].size - acc.group_size < acc.group_size:
            continue  # removal would strip the layer below its minimum width
        score = err
        if lut is not None and eta != 0.0:
            score += eta * _group_latency_delta(plan, plan.spaces[space_idx],
                                                acc.group_size, lut)
        scored.append((score, space_idx, start))
    scored.sort(key=lambda t: (t[0], t[1], t[2]))
    return scored


# -- structural removal --------------------------------------------------------------


def remove_channels(plan: PrunePlan, space: ChannelSpace, channels) -> None:
    """Physically delete the given channels from every producer and rewire
    every consumer; gates and BN buffers shrink alongside."""
    channels = sorted(set(int(c) for c in channels))
    if not space.prunable:
        raise ValueError(f"space {space.index} is not prunable")
    if len(channels) >= space.size:
        raise ValueError(f"cannot remove all {space.size} channels of space {space.index}")
    for conv, bn in space.producers:
        conv.weight.data = np.delete(conv.weight.data, channels, axis=0)
        if conv.bias is not None:
            conv.bias.data = np.delete(conv.bias.data, channels, axis=0)
        conv.out_ch -= len(channels)
        if bn is not None:
            bn.gamma.data = np.delete(bn.gamma.data, channels, axis=0)
            bn.beta.data = np.delete(bn.beta.data, channels, axis=0)
            bn.running_mean = np.delete(bn.running_mean, channels, axis=0)
            bn.running_var = np.delete(bn.running_var, channels, axis=0)
            bn.ch -= len(channels)
    for kind, consumer in space.consumers:
        if kind == "conv":
            consumer.weight.data = np.delete(consumer.weight.data, channels, axis=1)
            consumer.in_ch -= len(channels)
        else:
            consumer.weight.data = np.delete(consumer.weight.data, channels, axis=1)
            consumer.in_f -= len(channels)
    if space.gate is not None:
        space.gate.data = np.delete(space.gate.data, channels, axis=0)
        if space.gate.grad is not None:
            space.gate.grad = np.delete(space.gate.grad, channels, axis=0)
    space.size -= len(channels)
    # keep residual block descriptors in sync with their convs
    for layer in plan.model.layers:
        if isinstance(layer, ResidualBlock):
            layer.in_ch = layer.conv1.in_ch
            layer.out_ch = layer.conv2.out_ch


# -- prune-and-finetune loop -----------------------------------------------------------


@dataclass
class PruneConfig:
    eta: float = 0.01
    filters_per_step: int = 4
    group_size: int = 2
    steps_between: int = 30       # mini-batches of importance accumulation per removal
    target_fraction: float | None = 0.3   # fraction of prunable filters to remove
    latency_budget: float | None = None   # alternative stop condition, in ms
    finetune_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    temperature: float = 5.0
    seed: int = 0

    def validate(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.filters_per_step % self.group_size:
            raise ValueError("filters_per_step must be a multiple of group_size")
        if self.target_fraction is None and self.latency_budget is None:
            raise ValueError("need a filter fraction or latency budget target")


def prune_loop(teacher: Model, student: Model, source, cfg: PruneConfig,
               labels_source: LabeledBatch | None = None,
               test_data: LabeledBatch | None = None,
               lut: LatencyLUT | None = None,
               report_path: str | None = None) -> list[dict]:
    """Alternate importance accumulation (with simultaneous KD updates),
    removal of the lowest-ranked groups, and a final fine-tune.

    source: ImageStore or LabeledBatch supplying images; labels are never used
    unless labels_source is passed for ce-based importance.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    plan = PrunePlan(student)
    gates = insert_gates(plan)
    lut = lut if lut is not None else build_lut(student)
    acc = ImportanceAccumulator(plan, cfg.group_size)
    opt = SGD(student.parameters(), lr=cfg.lr, momentum=0.9)
    t_flags = [p.requires_grad for p in teacher.parameters()]
    teacher.requires_grad_(False)

    total0 = plan.total_prunable_filters()
    removed = 0
    rows = []

    def target_met() -> bool:
        if cfg.target_fraction is not None and removed >= int(cfg.target_fraction * total0):
            return True
        if cfg.latency_budget is not None and estimate_latency(student, lut) <= cfg.latency_budget:
            return True
        return False

    def record(step):
        row = {"step": step, "filters_remaining": plan.total_prunable_filters(),
               "est_latency_ms": estimate_latency(student, lut)}
        if test_data is not None:
            from .distill import evaluate
            row["top1"] = evaluate(student, test_data)
        rows.append(row)

    step = 0
    record(step)
    try:
        while not target_met():
            acc.reset()
            for _ in range(cfg.steps_between):
                images = _images_from(source, rng, cfg.batch_size)
                with T.no_grad():
                    t_logits = teacher.logits(Tensor(images)).data
                loss = kd_loss(t_logits, student.logits(Tensor(images)), cfg.temperature)
                opt.zero_grad()
                for g in gates:
                    g.grad = None
                loss.backward()
                acc.accumulate()
                opt.step()
                step += 1
            ranked = combined_importance(acc, plan, lut, cfg.eta)
            groups_needed = cfg.filters_per_step // cfg.group_size
            taken = 0
            pending: dict[int, list[int]] = {}
            for _, sidx, start in ranked:
                if taken == groups_needed:
                    break
                sp = plan.spaces[sidx]
                already = len(pending.get(sidx, []))
                if sp.size - already - cfg.group_size < cfg.group_size:
                    continue  # never strip a layer bare
                pending.setdefault(sidx, []).extend(range(start, start + cfg.group_size))
                taken += 1
            if taken < groups_needed:
                raise RuntimeError("pruning target unreachable: every remaining layer is at its minimum width")
            for sidx, chans in pending.items():
                remove_channels(plan, plan.spaces[sidx], chans)
                removed += len(chans)
            # parameter shapes changed; momentum buffers are stale
            opt = SGD(student.parameters(), lr=cfg.lr, momentum=0.9)
            record(step)
    finally:
        for p, fl in zip(teacher.parameters(), t_flags):
            p.requires_grad = fl

    remove_gates(plan)
    if cfg.finetune_epochs > 0:
        from .distill import distill, DistillConfig
        dcfg = DistillConfig(temperature=cfg.temperature, epochs=cfg.finetune_epochs,
                             lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed + 1)
        distill(teacher, student, source, dcfg)
        record(step)

    if report_path:
        with open(report_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "filters_remaining", "est_latency_ms", "top1"])
            for row in rows:
                w.writerow([row["step"], row["filters_remaining"],
                            f"{row['est_latency_ms']:.6f}", f"{row.get('top1', float('nan')):.6f}"])
    return rows


def _images_from(source, rng: np.random.Generator, n: int) -> np.ndarray:
    if isinstance(source, ImageStore):
        return source.sample(rng, n)
    idx = rng.integers(0, len(source), n)
    return source.images[idx]
