"""Toy-scale task heads: a patch classifier and a fully-convolutional
segmenter, with clean-data pretraining and a freeze switch.

Freezing marks every parameter non-trainable so optimizer steps leave the
head bit-identical, but gradients still flow through it to its input.
"""

import logging

import numpy as np

from . import ops
from .data import LabeledDataset, ToyDataset
from .layers import Conv2d, Linear, Module
from .metrics import mean_iou, topk_accuracy
from .tensor import Tape, Tensor, backward
from .training import TrainingLog

log = logging.getLogger(__name__)

SEGMENTATION_IGNORE_LABEL = 255

# Eval-gate defaults; a head that misses its gate is refused by the cascade.
DEFAULT_TARGET = {"classification": 0.95, "segmentation": 0.70}


class HighLevelHead(Module):
    """Common head machinery: per-channel mean removal and freeze state."""

    kind = None

    def __init__(self, num_classes, in_channels, dtype):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.dtype = dtype
        self.frozen = False
        self.pretrain_metric = None
        self.channel_means = self.add_buffer("head.channel_means",
                                             np.zeros(in_channels, dtype=dtype))

    def _prep(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"head expects {self.in_channels} channels, got {x.shape[1]}")
        return ops.subtract_channel_means(x, self.channel_means)

    def logits_array(self, images, batch=64):
        """Eval-mode logits for a numpy image stack, without recording."""
        outs = []
        for i in range(0, len(images), batch):
            outs.append(self.forward(Tensor(images[i:i + batch], dtype=self.dtype)).data)
        return np.concatenate(outs, axis=0)


class ClassifierHead(HighLevelHead):
    """Three conv+ReLU stages with 2x pooling, then global average pooling
    and a linear map to class logits."""

    kind = "classification"

    def __init__(self, num_classes=2, in_channels=3, seed=0, dtype=np.float32,
                 widths=(16, 32, 64)):
        super().__init__(num_classes, in_channels, dtype)
        rng = np.random.default_rng([int(seed), 20])
        chans = (in_channels,) + tuple(widths)
        self.convs = [
            self.add_child(Conv2d(f"head.c{i}", rng, chans[i], chans[i + 1], 3,
                                  pad=1, dtype=dtype))
            for i in range(3)
        ]
        self.fc = self.add_child(Linear("head.fc", rng, widths[-1], num_classes, dtype=dtype))

    def forward(self, x):
        h = self._prep(x)
        for conv in self.convs:
            h = ops.max_pool2(ops.relu(conv.forward(h)))
        return self.fc.forward(ops.global_avg_pool(h))


class SegmenterHead(HighLevelHead):
    """Three conv+ReLU stages with no spatial reduction, then a 1x1
    projection to per-pixel class logits."""

    kind = "segmentation"

    def __init__(self, num_classes=3, in_channels=3, seed=0, dtype=np.float32,
                 widths=(16, 32, 64)):
        super().__init__(num_classes, in_channels, dtype)
        self.ignore_label = SEGMENTATION_IGNORE_LABEL
        rng = np.random.default_rng([int(seed), 21])
        chans = (in_channels,) + tuple(widths)
        self.convs = [
            self.add_child(Conv2d(f"head.c{i}", rng, chans[i], chans[i + 1], 3,
                                  pad=1, dtype=dtype))
            for i in range(3)
        ]
        self.out = self.add_child(Conv2d("head.out", rng, widths[-1], num_classes, 1, dtype=dtype))

    def forward(self, x):
        h = self._prep(x)
        for conv in self.convs:
            h = ops.relu(conv.forward(h))
        return self.out.forward(h)


def make_head(kind, num_classes=None, seed=0, dtype=np.float32):
    if kind == "classification":
        return ClassifierHead(num_classes or 2, seed=seed, dtype=dtype)
    if kind == "segmentation":
        return SegmenterHead(num_classes or 3, seed=seed, dtype=dtype)
    raise ValueError(f"unknown head kind {kind!r}")


def freeze(head):
    """Mark all parameters non-trainable. Gradients still flow through the
    head to its input during backward."""
    for p in head.parameters():
        p.trainable = False
    head.frozen = True


def unfreeze(head):
    for p in head.parameters():
        p.trainable = True
    head.frozen = False


def head_loss(head, inputs, labels):
    """Cross-entropy of the head on ``inputs`` against ``labels``."""
    lab = np.asarray(getattr(labels, "data", labels))
    if head.kind == "classification":
        if lab.ndim != 1:
            raise ValueError(f"classification head needs per-image labels, got shape {lab.shape}")
        return ops.cross_entropy_loss(head.forward(inputs), lab)
    if lab.ndim != 3:
        raise ValueError(f"segmentation head needs per-pixel label maps, got shape {lab.shape}")
    return ops.cross_entropy_loss(head.forward(inputs), lab,
                                  ignore_label=head.ignore_label)


def evaluate_head(head, dataset, batch=64):
    """Top-1 accuracy (classification) or mIoU (segmentation) on a dataset."""
    logits = head.logits_array(dataset.images, batch=batch)
    if head.kind == "classification":
        return topk_accuracy(logits, dataset.labels, 1)
    pred = logits.argmax(axis=1)
    return mean_iou(pred, dataset.labels, head.num_classes,
                    ignore_label=getattr(head, "ignore_label", None))


def pretrain_head(head, clean_dataset, schedule, target_metric=None, seed=0):
    """Train an unfrozen head on clean data until it clears its eval gate.

    ``clean_dataset`` is a ToyDataset (train split for fitting, test split
    for the gate). On success ``head.pretrain_metric`` records the held-out
    metric; on failure it stays None and the log reports reached_target
    False, which makes the cascade refuse the head.
    """
    if head.frozen:
        raise ValueError("cannot pretrain a frozen head")
    if isinstance(clean_dataset, ToyDataset):
        train, test = clean_dataset.train, clean_dataset.test
    else:
        raise TypeError("pretrain_head expects a ToyDataset")
    if train.kind != head.kind:
        raise ValueError(f"dataset kind {train.kind!r} does not match head kind {head.kind!r}")
    schedule.validate()
    if target_metric is None:
        target_metric = DEFAULT_TARGET[head.kind]

    means = train.images.mean(axis=(0, 2, 3))
    head.channel_means[...] = means.astype(head.dtype)

    params = head.parameters()
    tlog = TrainingLog()
    tlog.target_metric = target_metric
    n = len(train)
    head.train()
    for it in range(schedule.total_iters):
        rng = np.random.default_rng([int(seed), 30, it])
        idx = rng.integers(0, n, schedule.batch_size)
        batch = Tensor(train.images[idx], dtype=head.dtype)
        with Tape():
            loss = head_loss(head, batch, train.labels[idx])
        backward(loss)
        ops.sgd_step(params, schedule.lr_at(it))
        tlog.append(it, loss.item(), loss_h=loss.item(), lr=schedule.lr_at(it))
    head.eval()

    metric = evaluate_head(head, test)
    tlog.achieved_metric = metric
    tlog.reached_target = metric >= target_metric
    if tlog.reached_target:
        head.pretrain_metric = metric
        log.info("pretrained %s head: held-out metric %.4f (gate %.2f)",
                 head.kind, metric, target_metric)
    else:
        log.warning("pretraining missed the gate: %.4f < %.2f", metric, target_metric)
    return tlog


def head_meta(head):
    meta = {
        "kind": head.kind,
        "num_classes": str(head.num_classes),
        "channel_means": ",".join(f"{v:.8e}" for v in head.channel_means),
    }
    if head.pretrain_metric is not None:
        meta["pretrain_metric"] = f"{head.pretrain_metric:.6f}"
    return meta


def head_from_checkpoint(arrays, meta, dtype=np.float32):
    head = make_head(meta["kind"], int(meta["num_classes"]), dtype=dtype)
    head.load_state_arrays(arrays)
    if "pretrain_metric" in meta:
        head.pretrain_metric = float(meta["pretrain_metric"])
    head.eval()
    return head
