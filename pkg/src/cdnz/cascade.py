"""Denoiser -> frozen task head cascade, trained end-to-end on the joint
loss  L = L_D + lambda * L_H  where only the denoiser receives updates.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data import quantize8
from .denoiser import DenoiserConfig, DenoiserNet
from .highlevel import evaluate_head, head_loss
from .metrics import MetricsReport, mean_iou, psnr, topk_accuracy
from .tensor import Tape, Tensor, backward
from .training import OptimizerSchedule, TrainingLog

log = logging.getLogger(__name__)

VARIANTS = ("vgg", "separate", "joint", "cross")

_STREAM_CASCADE = 40
_STREAM_EVAL_NOISE = 41
_STREAM_CASCADE_FIXED = 42


@dataclass
class CascadeConfig:
    """Full description of one joint-training experiment."""

    lam: float = 0.25
    sigma: float = 25.0
    task: str = "classification"
    schedule: OptimizerSchedule = field(default_factory=OptimizerSchedule)
    seed: int = 0
    fresh_noise: bool = True

    def validate(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.task not in ("classification", "segmentation"):
            raise ValueError(f"task must be classification or segmentation, got {self.task!r}")
        self.schedule.validate()
        return self


class Cascade:
    def __init__(self, denoiser, head, config):
        config.validate()
        if head.kind != config.task:
            raise ValueError(f"head kind {head.kind!r} does not match task {config.task!r}")
        self.denoiser = denoiser
        self.head = head
        self.config = config
        self.warnings = []
        self.denoiser_meta = None

    def parameters(self):
        return self.denoiser.parameters() + self.head.parameters()


def joint_loss(cascade, x, clean, labels):
    """(L, L_D, L_H) with L = L_D + lambda * L_H.

    L_D is the reconstruction MSE against the noiseless image, L_H the
    head's cross-entropy on the denoised output. The head must be frozen.
    """
    if not cascade.head.frozen:
        raise ValueError("joint_loss requires a frozen head")
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=cascade.denoiser.dtype)
    if not isinstance(clean, Tensor):
        clean = Tensor(clean, dtype=cascade.denoiser.dtype)
    denoised = cascade.denoiser.forward(x)
    loss_d = ops.mse_loss(denoised, clean)
    loss_h = head_loss(cascade.head, denoised, labels)
    total = ops.add(loss_d, ops.scale(loss_h, cascade.config.lam))
    return total, loss_d, loss_h


def train_cascade(cascade, dataset, schedule=None, log_every=0):
    """Joint training on noisy copies of a clean labeled dataset.

    Noise at the configured sigma is sampled fresh every iteration (or a
    fixed noisy copy per image when fresh_noise is off). Only denoiser
    parameters change; the frozen head stays bit-identical.
    """
    head = cascade.head
    if head.pretrain_metric is None:
        raise ValueError("head was not pretrained to its eval gate; cascade refuses it")
    if not head.frozen:
        raise ValueError("train_cascade requires a frozen head")
    if dataset.kind != cascade.config.task:
        raise ValueError(f"dataset kind {dataset.kind!r} != task {cascade.config.task!r}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    schedule = (schedule or cascade.config.schedule).validate()
    sigma = cascade.config.sigma
    seed = cascade.config.seed

    fixed_noisy = None
    if not cascade.config.fresh_noise:
        rng = np.random.default_rng([seed, _STREAM_CASCADE_FIXED])
        fixed_noisy = dataset.images + rng.normal(
            0.0, sigma / 255.0, dataset.images.shape).astype(np.float32)

    params = cascade.parameters()
    cascade.denoiser.train()
    head.eval()  # frozen weights; keep its statistics (if any) fixed
    tlog = TrainingLog()
    n = len(dataset)
    for it in range(schedule.total_iters):
        rng = np.random.default_rng([seed, _STREAM_CASCADE, it])
        idx = rng.integers(0, n, schedule.batch_size)
        clean = dataset.images[idx]
        if fixed_noisy is not None:
            noisy = fixed_noisy[idx]
        else:
            noisy = clean + rng.normal(0.0, sigma / 255.0, clean.shape).astype(np.float32)
        labels = dataset.labels[idx]
        lr = schedule.lr_at(it)
        with Tape():
            total, loss_d, loss_h = joint_loss(cascade, noisy, clean, labels)
        backward(total)
        ops.sgd_step(params, lr)
        tlog.append(it, total.item(), loss_d=loss_d.item(), loss_h=loss_h.item(), lr=lr)
        if log_every and it % log_every == 0:
            log.info("iter %d: L %.6f (L_D %.6f, L_H %.6f)",
                     it, total.item(), loss_d.item(), loss_h.item())
    cascade.denoiser.eval()
    return tlog


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_denoiser_checkpoint(path, net, sigma, iteration=0, extra_meta=None):
    meta = {
        "sigma": f"{float(sigma):g}",
        "config": net.config.to_meta(),
        "iteration": str(int(iteration)),
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, net.state_arrays(), meta)


def load_denoiser_checkpoint(path, dtype=np.float32):
    arrays, meta = load_checkpoint(path)
    config = DenoiserConfig.from_meta(meta["config"])
    net = DenoiserNet(config, seed=0, dtype=dtype)
    net.load_state_arrays(arrays)
    net.eval()
    return net, meta


def plug_cross_task(denoiser_ckpt, new_head, expect_sigma=None):
    """Load a trained denoiser and connect it to a different frozen head.

    No parameter of either part is updated. A sigma mismatch between the
    checkpoint and the requested evaluation noise is recorded as a warning
    and evaluation proceeds.
    """
    if new_head.pretrain_metric is None:
        raise ValueError("cross-task head was not pretrained to its eval gate")
    if not new_head.frozen:
        raise ValueError("cross-task head must be frozen")
    net, meta = load_denoiser_checkpoint(denoiser_ckpt)
    ckpt_sigma = float(meta.get("sigma", "0"))
    config = CascadeConfig(lam=0.0, sigma=expect_sigma if expect_sigma is not None else ckpt_sigma,
                           task=new_head.kind)
    cascade = Cascade(net, new_head, config)
    cascade.denoiser_meta = meta
    if expect_sigma is not None and expect_sigma != ckpt_sigma:
        msg = (f"checkpoint trained at sigma={ckpt_sigma:g} but evaluation requested "
               f"sigma={expect_sigma:g}")
        cascade.warnings.append(msg)
        log.warning("%s", msg)
    return cascade


# ---------------------------------------------------------------------------
# pipeline evaluation


def noisy_testset(images, sigma, seed=0):
    """The fixed noisy evaluation copy shared by every pipeline variant."""
    rng = np.random.default_rng([int(seed), _STREAM_EVAL_NOISE, int(round(sigma * 1000))])
    if sigma == 0:
        return images.copy()
    return images + rng.normal(0.0, sigma / 255.0, images.shape).astype(np.float32)


def run_pipeline(variant, testset, sigma, head, denoiser=None, seed=0, batch=32):
    """Evaluate one pipeline variant at one noise level.

    vgg: noisy images straight into the head. separate/joint/cross: noisy
    images through the given denoiser first. Emits one record per metric,
    plus the denoised-output PSNR when a denoiser is involved.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if head.pretrain_metric is None:
        raise ValueError(f"variant {variant!r}: head missing its pretraining gate")
    if variant != "vgg" and denoiser is None:
        raise ValueError(f"variant {variant!r} requires a denoiser checkpoint")

    noisy = noisy_testset(testset.images, sigma, seed=seed)
    if variant == "vgg":
        inputs = noisy
    else:
        denoiser.eval()
        outs = []
        for i in range(0, len(noisy), batch):
            outs.append(denoiser.forward(Tensor(noisy[i:i + batch], dtype=denoiser.dtype)).data)
        inputs = np.concatenate(outs, axis=0)

    head.eval()
    logits = head.logits_array(inputs, batch=batch)
    report = MetricsReport()
    if head.kind == "classification":
        report.add(variant, sigma, "top1", topk_accuracy(logits, testset.labels, 1))
        if head.num_classes >= 5:
            report.add(variant, sigma, "top5", topk_accuracy(logits, testset.labels, 5))
    else:
        pred = logits.argmax(axis=1)
        report.add(variant, sigma, "miou",
                   mean_iou(pred, testset.labels, head.num_classes,
                            ignore_label=getattr(head, "ignore_label", None)))
    if variant != "vgg":
        vals = [psnr(quantize8(inputs[i]), quantize8(testset.images[i]))
                for i in range(len(testset.images))]
        report.add(variant, sigma, "psnr", float(np.mean(vals)))
    return report


def clean_accuracy_identity_check(head, testset):
    """Head accuracy on clean data, used by the sigma=0 degenerate case."""
    return evaluate_head(head, testset)
