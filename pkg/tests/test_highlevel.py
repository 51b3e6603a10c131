"""Task heads: shapes, freezing semantics, loss delegation, pretraining."""

import math

import numpy as np
import pytest

from cdnz import ops
from cdnz.checkpoint import load_checkpoint, save_checkpoint
from cdnz.data import generate_toy
from cdnz.denoiser import DenoiserConfig, build_denoiser
from cdnz.highlevel import (ClassifierHead, SegmenterHead, evaluate_head,
                            freeze, head_from_checkpoint, head_loss, head_meta,
                            make_head, pretrain_head, unfreeze)
from cdnz.tensor import Tape, Tensor, backward
from cdnz.training import OptimizerSchedule

from conftest import check_grad_entries


def test_make_head_kinds():
    assert make_head("classification").kind == "classification"
    assert make_head("segmentation").kind == "segmentation"
    with pytest.raises(ValueError):
        make_head("detection")


def test_classifier_shapes():
    head = ClassifierHead(num_classes=2, seed=0)
    for size in (16, 32):
        x = Tensor(np.random.default_rng(0).random((4, 3, size, size), dtype=np.float32))
        assert head.forward(x).shape == (4, 2)


def test_segmenter_shapes_aligned():
    head = SegmenterHead(num_classes=3, seed=0)
    x = Tensor(np.random.default_rng(1).random((2, 3, 24, 20), dtype=np.float32))
    assert head.forward(x).shape == (2, 3, 24, 20)


def test_freeze_unfreeze_roundtrip():
    head = make_head("classification", seed=1)
    assert not head.frozen
    freeze(head)
    assert head.frozen and all(not p.trainable for p in head.parameters())
    unfreeze(head)
    assert not head.frozen and all(p.trainable for p in head.parameters())


def test_frozen_head_bit_identical_after_step():
    head = make_head("classification", seed=2)
    freeze(head)
    before = {p.name: p.value.data.tobytes() for p in head.parameters()}
    x = Tensor(np.random.default_rng(2).random((2, 3, 16, 16), dtype=np.float32),
               requires_grad=True)
    with Tape():
        loss = head_loss(head, x, np.array([0, 1]))
    backward(loss)
    ops.sgd_step(head.parameters(), 0.5)
    after = {p.name: p.value.data.tobytes() for p in head.parameters()}
    assert before == after


def test_gradient_flows_through_frozen_head():
    head = make_head("classification", seed=3, dtype=np.float64)
    freeze(head)
    x = Tensor(np.random.default_rng(3).random((1, 3, 16, 16)), requires_grad=True,
               dtype=np.float64)
    labels = np.array([1])
    with Tape():
        loss = head_loss(head, x, labels)
    backward(loss)
    assert x.grad is not None and np.abs(x.grad).max() > 0

    def f():
        with Tape():
            return head_loss(head, x, labels).item()

    idxs = np.random.default_rng(4).choice(x.size, size=12, replace=False)
    checked, skipped = check_grad_entries(f, x.data, x.grad, idxs, rtol=1e-3)
    assert checked >= 8


def test_head_loss_uniform_logits_ln2():
    head = make_head("classification", seed=4)
    for p in head.parameters():
        p.value.data[...] = 0.0  # zero net -> uniform logits
    x = Tensor(np.random.default_rng(5).random((3, 3, 16, 16), dtype=np.float32))
    loss = head_loss(head, x, np.array([0, 1, 0]))
    assert loss.item() == pytest.approx(math.log(2), rel=1e-6)


def test_head_loss_all_ignored_zero():
    head = make_head("segmentation", seed=5)
    x = Tensor(np.random.default_rng(6).random((1, 3, 8, 8), dtype=np.float32))
    labels = np.full((1, 8, 8), 255, dtype=np.int64)
    assert head_loss(head, x, labels).item() == 0.0


def test_head_loss_delegates_to_cross_entropy():
    head = make_head("segmentation", seed=6)
    x = Tensor(np.random.default_rng(7).random((2, 3, 8, 8), dtype=np.float32))
    labels = np.random.default_rng(8).integers(0, 3, (2, 8, 8))
    direct = ops.cross_entropy_loss(head.forward(x), labels,
                                    ignore_label=head.ignore_label)
    assert head_loss(head, x, labels).item() == direct.item()


def test_head_loss_kind_mismatch_rejected():
    head = make_head("classification", seed=7)
    x = Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError, match="per-image"):
        head_loss(head, x, np.zeros((1, 8, 8), dtype=np.int64))
    seg = make_head("segmentation", seed=7)
    with pytest.raises(ValueError, match="per-pixel"):
        head_loss(seg, x, np.zeros(1, dtype=np.int64))


def test_pretrain_rejects_frozen_head():
    head = make_head("classification", seed=8)
    freeze(head)
    toy = generate_toy("classification", 8, seed=0, image_size=16)
    with pytest.raises(ValueError, match="frozen"):
        pretrain_head(head, toy, OptimizerSchedule(total_iters=1, batch_size=2,
                                                   patch_size=16))


def test_pretrain_classifier_reaches_gate():
    toy = generate_toy("classification", 240, seed=1, image_size=32)
    head = make_head("classification", seed=9)
    sched = OptimizerSchedule(lr0=0.05, decay_every=600, total_iters=800,
                              batch_size=16, patch_size=32)
    tlog = pretrain_head(head, toy, sched, seed=9)
    assert tlog.reached_target, f"metric {tlog.achieved_metric}"
    assert head.pretrain_metric is not None and head.pretrain_metric >= 0.95
    # per-channel means recorded from the clean training split
    means = toy.train.images.mean(axis=(0, 2, 3))
    assert np.allclose(head.channel_means, means, atol=1e-6)
    # smoothed pretraining curve is monotone non-increasing
    sm = tlog.smoothed_losses(50)
    assert all(sm[i + 1] <= sm[i] + 1e-3 for i in range(len(sm) - 1))


def test_pretrain_segmenter_reaches_gate():
    toy = generate_toy("segmentation", 160, seed=2, image_size=32)
    head = make_head("segmentation", seed=10)
    sched = OptimizerSchedule(lr0=0.05, decay_every=700, total_iters=1000,
                              batch_size=8, patch_size=32)
    tlog = pretrain_head(head, toy, sched, seed=10)
    assert tlog.reached_target, f"metric {tlog.achieved_metric}"
    assert head.pretrain_metric >= 0.70


def test_pretrain_gate_failure_reported():
    toy = generate_toy("classification", 16, seed=3, image_size=16)
    head = make_head("classification", seed=11)
    sched = OptimizerSchedule(lr0=1e-6, decay_every=10, total_iters=5,
                              batch_size=4, patch_size=16)
    tlog = pretrain_head(head, toy, sched, seed=11)
    assert not tlog.reached_target
    assert head.pretrain_metric is None


def test_clean_fidelity_through_identity_denoiser():
    toy = generate_toy("classification", 60, seed=4, image_size=16)
    head = make_head("classification", seed=12)
    head.pretrain_metric = 1.0  # mechanics-only shortcut
    direct = evaluate_head(head, toy.test)
    net = build_denoiser(DenoiserConfig(scales=2), seed=0)
    net.proj.w.value.data[...] = 0.0
    net.proj.b.value.data[...] = 0.0
    net.eval()
    passed = net.forward(Tensor(toy.test.images)).data
    logits = head.logits_array(passed)
    from cdnz.metrics import topk_accuracy

    assert topk_accuracy(logits, toy.test.labels, 1) == direct


def test_head_checkpoint_roundtrip(tmp_path):
    toy = generate_toy("segmentation", 12, seed=5, image_size=16)
    head = make_head("segmentation", seed=13)
    head.channel_means[...] = toy.train.images.mean(axis=(0, 2, 3))
    head.pretrain_metric = 0.83
    p = tmp_path / "head.cdnz"
    save_checkpoint(p, head.state_arrays(), head_meta(head))
    arrays, meta = load_checkpoint(p)
    head2 = head_from_checkpoint(arrays, meta)
    assert head2.kind == "segmentation" and head2.num_classes == 3
    assert head2.pretrain_metric == pytest.approx(0.83)
    x = toy.test.images[:2]
    assert np.array_equal(head.logits_array(x), head2.logits_array(x))
