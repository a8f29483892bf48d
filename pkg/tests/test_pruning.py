"""Filter pruning: channel-space discovery, gate-vs-removal equivalence,
Taylor importance against a leave-one-out oracle, and the latency LUT."""

import math

import numpy as np
import pytest

from deepinvert import tensor as T
from deepinvert.tensor import Tensor
from deepinvert.nn import build_model, ResidualBlock
from deepinvert.data import gen_shapes
from deepinvert.distill import train_teacher
from deepinvert.pruning import (PrunePlan, insert_gates, remove_gates,
                                ImportanceAccumulator, taylor_importance,
                                default_cost_model, LatencyLUT, build_lut,
                                estimate_latency, combined_importance,
                                remove_channels, PruneConfig, prune_loop)


def small_vgg(seed=0, width=4, classes=4):
    return build_model("vgg_small", in_shape=(3, 16, 16), classes=classes,
                       width=width, seed=seed)


def small_resnet(seed=0, width=4, classes=4):
    return build_model("resnet_small", in_shape=(3, 16, 16), classes=classes,
                       width=width, seed=seed)


def spearman(a, b):
    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(len(x))
        return r
    ra, rb = ranks(np.asarray(a)), ranks(np.asarray(b))
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / math.sqrt((ra ** 2).sum() * (rb ** 2).sum()))


# -- channel space discovery ---------------------------------------------------------


def test_plan_vgg_spaces():
    model = small_vgg()
    plan = PrunePlan(model)
    pr = plan.prunable_spaces()
    # every conv output is independently prunable in a plain feedforward net
    n_convs = sum(1 for l in model.layers if type(l).__name__ == "Conv2d")
    assert len(pr) == n_convs
    for sp in pr:
        assert len(sp.producers) == 1
        assert sp.producers[0][1] is not None  # conv followed by BN


def test_plan_resnet_identity_block_shares_space():
    model = small_resnet()
    plan = PrunePlan(model)
    blocks = [l for l in model.layers if isinstance(l, ResidualBlock)]
    identity = [b for b in blocks if b.short_conv is None]
    assert identity, "expected at least one identity-shortcut block"
    b = identity[0]
    # conv2 of an identity block writes into the same space as the incoming
    # activation, so some space has >= 2 producers including conv2
    spaces_of_conv2 = [sp for sp in plan.spaces
                       if any(conv is b.conv2 for conv, _ in sp.producers)]
    assert len(spaces_of_conv2) == 1
    assert len(spaces_of_conv2[0].producers) >= 2


def test_plan_resnet_downsample_block_new_space():
    model = small_resnet()
    plan = PrunePlan(model)
    down = [b for b in model.layers
            if isinstance(b, ResidualBlock) and b.short_conv is not None]
    assert down
    b = down[0]
    spaces = [sp for sp in plan.spaces
              if any(conv is b.conv2 for conv, _ in sp.producers)]
    assert len(spaces) == 1
    producer_convs = {conv for conv, _ in spaces[0].producers}
    assert b.short_conv in producer_convs


def test_plan_head_and_input_not_prunable():
    plan = PrunePlan(small_vgg())
    assert not plan.spaces[0].prunable
    assert not plan.spaces[-1].prunable


def test_plan_rejects_unknown_layer():
    model = small_vgg()
    class Weird:
        pass
    model.layers.append(Weird())
    with pytest.raises(ValueError):
        PrunePlan(model)


# -- gates ------------------------------------------------------------------------------


def test_gate_all_ones_is_identity():
    model = small_vgg(seed=1)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        before = model.logits(Tensor(x.data)).data.copy()
    plan = PrunePlan(model)
    insert_gates(plan)
    with T.no_grad():
        after = model.logits(Tensor(x.data)).data
    assert np.array_equal(before, after)
    remove_gates(plan)


@pytest.mark.parametrize("maker", [small_vgg, small_resnet])
def test_gate_zero_equals_structural_removal(maker):
    # silencing channels through the gate and physically deleting them must
    # give bit-identical logits, for plain and skip-connected nets alike
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)

    gated = maker(seed=2)
    plan_g = PrunePlan(gated)
    insert_gates(plan_g)
    sp = plan_g.prunable_spaces()[0]
    kill = [0, sp.size - 1]
    sp.gate.data = sp.gate.data.copy()
    sp.gate.data[kill] = 0.0
    with T.no_grad():
        gated_logits = gated.logits(Tensor(x)).data.copy()

    cut = maker(seed=2)
    plan_c = PrunePlan(cut)
    target = plan_c.prunable_spaces()[0]
    remove_channels(plan_c, target, kill)
    with T.no_grad():
        cut_logits = cut.logits(Tensor(x)).data

    # removal changes the consumer's channel-summation order, so allow
    # float32 round-off but nothing more
    assert np.max(np.abs(gated_logits - cut_logits)) < 1e-6


def test_remove_channels_validation():
    plan = PrunePlan(small_vgg())
    with pytest.raises(ValueError):
        remove_channels(plan, plan.spaces[0], [0])  # input space
    sp = plan.prunable_spaces()[0]
    with pytest.raises(ValueError):
        remove_channels(plan, sp, list(range(sp.size)))


def test_insert_gates_requires_prunable_space():
    model = build_model("mlp_bn", in_shape=(1, 4, 4), classes=3, width=4,
                        depth=1, seed=0)
    with pytest.raises(ValueError):
        insert_gates(PrunePlan(model))


# -- importance --------------------------------------------------------------------------


def _trained_toy(seed=0, epochs=5):
    # one conv of 8 filters: the whole prunable set fits a brute-force oracle
    from deepinvert.nn import Model, Conv2d, BatchNorm, ReLU, GlobalAvgPool, Linear
    rng = np.random.default_rng(seed)
    model = Model([Conv2d(3, 8, rng=rng), BatchNorm(8), ReLU(), GlobalAvgPool(),
                   Linear(8, 4, rng=rng)], (3, 16, 16), 4)
    data = gen_shapes(0, 25, classes=4, size=16)
    train_teacher(model, data, epochs=epochs, lr=0.1, batch_size=16, seed=seed)
    return model, data


def _loo_scores(model, plan, images, labels):
    """Loss increase from zeroing each prunable channel, one at a time."""
    def loss_of():
        with T.no_grad():
            logits = model.logits(Tensor(images))
            return float(T.cross_entropy(logits, labels).data)
    base = loss_of()
    out = []
    for sp in plan.prunable_spaces():
        for c in range(sp.size):
            old = sp.gate.data[c]
            sp.gate.data[c] = 0.0
            out.append(loss_of() - base)
            sp.gate.data[c] = old
    return np.array(out)


def test_taylor_matches_leave_one_out_oracle():
    rhos = []
    for seed in range(3):
        model, data = _trained_toy(seed=seed)
        plan = PrunePlan(model)
        insert_gates(plan)
        batches = [(data.images[i:i + 16], data.labels[i:i + 16])
                   for i in range(0, len(data), 16)]
        acc = taylor_importance(model, plan, batches, "ce_labels", group_size=1)
        taylor = np.concatenate([acc.sums[sp.index] for sp in plan.prunable_spaces()])
        loo = _loo_scores(model, plan, data.images, data.labels)
        rhos.append(spearman(taylor, loo))
    assert np.median(rhos) >= 0.7, rhos


def test_label_free_importance_agrees_with_labeled():
    rhos = []
    for seed in range(3):
        model, data = _trained_toy(seed=seed)
        plan = PrunePlan(model)
        insert_gates(plan)
        ce_batches = [(data.images[i:i + 16], data.labels[i:i + 16])
                      for i in range(0, len(data), 16)]
        kl_batches = [data.images[i:i + 16] for i in range(0, len(data), 16)]
        ce = taylor_importance(model, plan, ce_batches, "ce_labels", group_size=1)
        # label-free signal: a separately trained reference provides soft targets
        teacher, _ = _trained_toy(seed=seed + 10)
        kl = taylor_importance(model, plan, kl_batches, "kl_teacher",
                               teacher=teacher, tau=1.0, group_size=1)
        a = np.concatenate([ce.sums[sp.index] for sp in plan.prunable_spaces()])
        b = np.concatenate([kl.sums[sp.index] for sp in plan.prunable_spaces()])
        rhos.append(spearman(a, b))
    assert np.median(rhos) >= 0.7, rhos


def test_taylor_importance_validation():
    model = small_vgg()
    plan = PrunePlan(model)
    insert_gates(plan)
    with pytest.raises(ValueError):
        taylor_importance(model, plan, [], "huber")
    with pytest.raises(ValueError):
        taylor_importance(model, plan, [], "kl_teacher")


def test_accumulator_invariants():
    model = small_vgg()
    plan = PrunePlan(model)
    insert_gates(plan)
    acc = ImportanceAccumulator(plan, group_size=2)
    with pytest.raises(RuntimeError):
        acc.accumulate()  # no backward yet
    data = gen_shapes(0, 2, classes=4, size=16)
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    loss = T.cross_entropy(model.logits(Tensor(data.images)), data.labels)
    loss.backward()
    for p, fl in zip(model.parameters(), flags):
        p.requires_grad = fl
    acc.accumulate()
    assert acc.batches_seen == 1
    for sp in plan.prunable_spaces():
        assert np.all(acc.sums[sp.index] >= 0.0)
    groups = acc.group_scores()
    assert len(groups) == sum(sp.size // 2 for sp in plan.prunable_spaces())
    total = sum(g[0] for g in groups)
    direct = sum(acc.sums[sp.index].sum() for sp in plan.prunable_spaces())
    assert math.isclose(total, direct, rel_tol=1e-12)
    acc.reset()
    assert acc.batches_seen == 0
    assert all(not np.any(v) for v in acc.sums.values())


# -- latency LUT -------------------------------------------------------------------------


def test_default_cost_model_scaling():
    base = default_cost_model(4, 4, 3, 1, 16)
    assert default_cost_model(8, 4, 3, 1, 16) - 1e-3 == pytest.approx(2 * (base - 1e-3))
    assert default_cost_model(4, 4, 3, 2, 16) - 1e-3 == pytest.approx((base - 1e-3) / 4)
    assert default_cost_model(1, 1, 1, 1, 1) == pytest.approx(1e-3 + 1e-6)


def test_build_lut_covers_all_reduced_widths():
    model = small_vgg(width=4)
    lut = build_lut(model)
    # every conv contributes in_ch * out_ch entries (dedup across identical convs)
    keys = set()
    from deepinvert.pruning import _trace_convs
    for conv in _trace_convs(model):
        for ci in range(1, conv.in_ch + 1):
            for co in range(1, conv.out_ch + 1):
                keys.add((ci, co, conv.k, conv.stride, conv.last_fmap))
    assert set(lut.entries) == keys
    # cost grows with width
    for conv in _trace_convs(model):
        full = lut.cost((conv.in_ch, conv.out_ch, conv.k, conv.stride, conv.last_fmap))
        half = lut.cost((conv.in_ch, max(1, conv.out_ch // 2), conv.k, conv.stride, conv.last_fmap))
        assert full > half


def test_lut_save_load_round_trip(tmp_path):
    lut = build_lut(small_vgg(width=4))
    path = str(tmp_path / "lut.txt")
    lut.save(path)
    back = LatencyLUT.load(path)
    assert back.version == lut.version
    assert back.entries == lut.entries  # repr round trip is exact


def test_lut_missing_key_names_context():
    lut = LatencyLUT({(1, 1, 3, 1, 8): 0.5})
    with pytest.raises(KeyError, match="no entry"):
        lut.cost((2, 2, 3, 1, 8), context="somewhere")


def test_estimate_latency_is_sum_of_conv_costs():
    model = small_vgg(width=4)
    lut = build_lut(model)
    from deepinvert.pruning import _trace_convs
    want = sum(lut.cost((c.in_ch, c.out_ch, c.k, c.stride, c.last_fmap))
               for c in _trace_convs(model))
    assert estimate_latency(model, lut) == pytest.approx(want, rel=1e-12)


def test_removal_reduces_estimated_latency():
    model = small_vgg(width=6)
    lut = build_lut(model)
    before = estimate_latency(model, lut)
    plan = PrunePlan(model)
    remove_channels(plan, plan.prunable_spaces()[0], [0, 1])
    after = estimate_latency(model, lut)
    assert after < before


# -- combined ranking --------------------------------------------------------------------


def _manual_acc(plan, scores_by_space):
    acc = ImportanceAccumulator(plan, group_size=2)
    for sidx, arr in scores_by_space.items():
        acc.sums[sidx] = np.asarray(arr, dtype=np.float64)
    return acc


def test_combined_importance_sorted_and_latency_biased():
    model = small_vgg(width=4)
    plan = PrunePlan(model)
    insert_gates(plan)
    lut = build_lut(model)
    pr = plan.prunable_spaces()
    # equal error scores everywhere: ranking must then be driven by latency
    acc = _manual_acc(plan, {sp.index: np.ones(sp.size) for sp in pr})
    ranked_flat = combined_importance(acc, plan, lut, eta=0.0)
    assert all(ranked_flat[i][0] <= ranked_flat[i + 1][0]
               for i in range(len(ranked_flat) - 1))
    assert len({r[0] for r in ranked_flat}) == 1

    ranked_lat = combined_importance(acc, plan, lut, eta=1.0)
    best_space = ranked_lat[0][1]
    # the cheapest-scored group under latency pressure sits where removal
    # saves the most time
    from deepinvert.pruning import _group_latency_delta
    deltas = {sp.index: _group_latency_delta(plan, sp, 2, lut) for sp in pr}
    assert deltas[best_space] == min(deltas.values())
    assert all(d < 0 for d in deltas.values())


def test_combined_importance_skips_minimum_width_layers():
    model = small_vgg(width=4)
    plan = PrunePlan(model)
    insert_gates(plan)
    sp = plan.prunable_spaces()[0]
    remove_channels(plan, sp, [0])  # width 3: one group would leave < group_size
    acc = _manual_acc(plan, {s.index: np.zeros(s.size) for s in plan.prunable_spaces()})
    ranked = combined_importance(acc, plan, None, eta=0.0)
    assert all(r[1] != sp.index for r in ranked)


# -- end-to-end loop ---------------------------------------------------------------------


def test_prune_loop_reaches_target_and_reports(tmp_path):
    teacher, data = _trained_toy(seed=3)
    student = teacher.clone()
    report = str(tmp_path / "report.csv")
    cfg = PruneConfig(eta=0.01, filters_per_step=2, group_size=2, steps_between=3,
                      target_fraction=0.25, finetune_epochs=1, batch_size=16,
                      lr=0.005, seed=0)
    total0 = PrunePlan(teacher.clone()).total_prunable_filters()
    rows = prune_loop(teacher, student, data, cfg, test_data=data,
                      report_path=report)
    plan_after = PrunePlan(student)
    assert plan_after.total_prunable_filters() <= total0 - int(0.25 * total0)
    lats = [r["est_latency_ms"] for r in rows]
    assert all(lats[i + 1] <= lats[i] for i in range(len(lats) - 2))
    lines = open(report).read().strip().split("\n")
    assert lines[0] == "step,filters_remaining,est_latency_ms,top1"
    assert len(lines) == len(rows) + 1
    # gates are gone and the model still runs
    assert all(l.gate is None for l in student.layers if hasattr(l, "gate"))
    with T.no_grad():
        student.logits(Tensor(data.images[:2]))


def test_prune_loop_unreachable_target():
    teacher, data = _trained_toy(seed=4)
    student = teacher.clone()
    cfg = PruneConfig(filters_per_step=2, group_size=2, steps_between=1,
                      target_fraction=0.9, finetune_epochs=0, batch_size=8, seed=0)
    with pytest.raises(RuntimeError, match="unreachable"):
        prune_loop(teacher, student, data, cfg)


def test_prune_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(eta=-1.0).validate()
    with pytest.raises(ValueError):
        PruneConfig(filters_per_step=3, group_size=2).validate()
    with pytest.raises(ValueError):
        PruneConfig(target_fraction=None, latency_budget=None).validate()
