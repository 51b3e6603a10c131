"""Multi-scale residual denoising network.

Geometry (three scales, the default): the input is feature-encoded, pushed
down twice by stride-2 downsampling with encoding at every scale, then
decoded on the way back up. Each upsampling is a 4x4 stride-2 transposed
convolution; its output is fused (channel concat by default) with the
encoder features of the scale above and passed through a decoding block.
A final 3x3 projection maps the top decoder features back to image
channels, and a long-distance skip adds the input image, so the trunk
learns the residual. See docs/architecture.md for the exact wiring.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import ops
from .data import PatchStream, sample_patches
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .tensor import Tape, Tensor, backward
from .training import TrainingLog

log = logging.getLogger(__name__)

ENCODE_WIDTHS = (128, 32, 32, 128)
DECODE_WIDTHS = (256, 64, 64, 256)
_KERNELS = (3, 1, 3, 1)


@dataclass
class DenoiserConfig:
    scales: int = 3
    fusion: str = "concat"            # concat | sum
    downsample: str = "strided_conv"  # strided_conv | max_pool
    input_channels: int = 3
    # Apply the 4th conv's batch-norm + ReLU after the inner skip sum
    # instead of before it (the default keeps them before).
    activate_after_skip: bool = False
    # 'zero' starts training from the exact identity mapping, which keeps
    # plain SGD stable at desk scale; 'gaussian' uses the fan-in init.
    final_proj_init: str = "zero"

    def validate(self):
        if self.scales < 2:
            raise ValueError(f"scales must be >= 2, got {self.scales}")
        if self.fusion not in ("concat", "sum"):
            raise ValueError(f"fusion must be concat or sum, got {self.fusion!r}")
        if self.downsample not in ("strided_conv", "max_pool"):
            raise ValueError(f"downsample must be strided_conv or max_pool, got {self.downsample!r}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if self.final_proj_init not in ("zero", "gaussian"):
            raise ValueError(f"final_proj_init must be zero or gaussian, got {self.final_proj_init!r}")
        return self

    def size_multiple(self):
        return 2 ** (self.scales - 1)

    def to_meta(self):
        return (f"scales={self.scales};fusion={self.fusion};"
                f"downsample={self.downsample};input_channels={self.input_channels};"
                f"activate_after_skip={int(self.activate_after_skip)};"
                f"final_proj_init={self.final_proj_init}")

    @classmethod
    def from_meta(cls, text):
        kv = dict(item.split("=", 1) for item in text.split(";"))
        return cls(scales=int(kv["scales"]), fusion=kv["fusion"],
                   downsample=kv["downsample"], input_channels=int(kv["input_channels"]),
                   activate_after_skip=bool(int(kv.get("activate_after_skip", "0"))),
                   final_proj_init=kv.get("final_proj_init", "zero")).validate()


class FeatureBlock(Module):
    """Four conv layers (3x3, 1x1, 3x3, 1x1), each with batch-norm + ReLU,
    plus an inner skip summing the first layer's output into the last's.
    3x3 convs are zero-padded to preserve size; 1x1 convs are unpadded."""

    def __init__(self, name, rng, in_ch, widths, dtype, activate_after_skip=False):
        super().__init__()
        if widths[0] != widths[3]:
            raise ValueError("inner skip needs matching first/last widths")
        self.activate_after_skip = activate_after_skip
        chans = (in_ch,) + tuple(widths[:3])
        self.convs = []
        self.bns = []
        for i, (cin, cout, k) in enumerate(zip(chans, widths, _KERNELS), start=1):
            pad = 1 if k == 3 else 0
            self.convs.append(self.add_child(
                Conv2d(f"{name}.c{i}", rng, cin, cout, k, pad=pad, dtype=dtype)))
            self.bns.append(self.add_child(BatchNorm2d(f"{name}.bn{i}", cout, dtype=dtype)))

    def forward(self, x):
        h1 = ops.relu(self.bns[0].forward(self.convs[0].forward(x)))
        h = ops.relu(self.bns[1].forward(self.convs[1].forward(h1)))
        h = ops.relu(self.bns[2].forward(self.convs[2].forward(h)))
        h = self.convs[3].forward(h)
        if self.activate_after_skip:
            return ops.relu(self.bns[3].forward(ops.add(h1, h)))
        h = ops.relu(self.bns[3].forward(h))
        return ops.add(h1, h)


class DenoiserNet(Module):
    """Encoder/decoder denoiser with a long-distance input skip.

    Output shape equals input shape whenever H and W are multiples of
    2**(scales-1); :func:`denoise_forward` handles other sizes by
    reflection padding. With the final projection zeroed, forward(x) == x
    exactly.
    """

    def __init__(self, config, seed, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng([int(seed), 0])
        s = config.scales
        enc_out = ENCODE_WIDTHS[-1]
        dec_out = DECODE_WIDTHS[-1]

        self.enc = []
        for i in range(s):
            in_ch = config.input_channels if i == 0 else enc_out
            self.enc.append(self.add_child(FeatureBlock(
                f"enc{i}", rng, in_ch, ENCODE_WIDTHS, dtype, config.activate_after_skip)))

        self.down = []
        if config.downsample == "strided_conv":
            for i in range(s - 1):
                self.down.append(self.add_child(Conv2d(
                    f"down{i}", rng, enc_out, enc_out, 3, stride=2, pad=1, dtype=dtype)))

        self.up = []
        self.dec = []
        for i in range(s - 2, -1, -1):
            below_ch = enc_out if i == s - 2 else dec_out
            # Upsampling always projects to the encoder width, so sum fusion
            # meets matching channel counts by construction.
            self.up.append(self.add_child(ConvTranspose2d(
                f"up{i}", rng, below_ch, enc_out, dtype=dtype)))
            fused_ch = 2 * enc_out if config.fusion == "concat" else enc_out
            self.dec.append(self.add_child(FeatureBlock(
                f"dec{i}", rng, fused_ch, DECODE_WIDTHS, dtype, config.activate_after_skip)))

        self.proj = self.add_child(Conv2d(
            "proj", rng, dec_out, config.input_channels, 3, pad=1, dtype=dtype))
        if config.final_proj_init == "zero":
            self.proj.w.value.data[...] = 0.0

    def _downsample(self, x, i):
        if self.config.downsample == "strided_conv":
            return self.down[i].forward(x)
        return ops.max_pool2(x)

    def _fuse(self, skip, up):
        if self.config.fusion == "concat":
            return ops.concat_channels(skip, up)
        return ops.add(skip, up)

    def set_bn_stats_frozen(self, flag):
        from .layers import BatchNorm2d

        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.stats_frozen = flag

    def forward(self, x):
        """Core forward pass; H and W must be multiples of 2**(scales-1)."""
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        n, c, h, w = x.shape
        if c != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, got {c}")
        m = self.config.size_multiple()
        if h % m or w % m:
            raise ValueError(f"forward needs H,W multiples of {m}; use denoise_forward")
        s = self.config.scales
        encoded = []
        cur = x
        for i in range(s):
            if i > 0:
                cur = self._downsample(cur, i - 1)
            cur = self.enc[i].forward(cur)
            encoded.append(cur)
        cur = encoded[-1]
        for j, i in enumerate(range(s - 2, -1, -1)):
            up = self.up[j].forward(cur)
            cur = self.dec[j].forward(self._fuse(encoded[i], up))
        return ops.add(self.proj.forward(cur), x)


def build_denoiser(config, seed, dtype=np.float32):
    """Deterministically initialized denoiser; same seed, same bits."""
    net = DenoiserNet(config, seed, dtype=dtype)
    log.info("built denoiser: %d parameters in %d tensors",
             net.num_params(), len(net.parameters()))
    return net


def denoise_forward(net, x):
    """Forward pass for arbitrary H, W >= 2**(scales-1).

    Sizes that are not multiples of 2**(scales-1) are reflection-padded on
    the bottom/right to the next multiple and the output is cropped back,
    so output shape always equals input shape.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=net.dtype)
    n, c, h, w = x.shape
    if c != net.config.input_channels:
        raise ValueError(f"expected {net.config.input_channels} input channels, got {c}")
    m = net.config.size_multiple()
    if h < m or w < m:
        raise ValueError(f"input {h}x{w} smaller than minimum {m}x{m}")
    pad_h = (-h) % m
    pad_w = (-w) % m
    if pad_h == 0 and pad_w == 0:
        return net.forward(x)
    out = net.forward(ops.reflect_pad2d(x, pad_h, pad_w))
    return ops.crop2d(out, h, w)


def recalibrate_bn_stats(net, dataset, patch_size, batches=50):
    """Refresh batch-norm running statistics with forward passes at the
    given patch size (training images only, no gradient steps)."""
    max_patch = min(min(img.shape[1], img.shape[2]) for img in dataset.images)
    stream = PatchStream(dataset.images, sigma=dataset.sigma,
                         patch_size=min(patch_size, max_patch),
                         batch_size=dataset.batch_size,
                         seed=dataset.seed, fresh_noise=True)
    # dedicated iteration offset so the stats stream never collides with
    # the training stream
    stream._iteration = 1 << 20
    net.train()
    net.set_bn_stats_frozen(False)
    for _ in range(batches):
        noisy, _clean = sample_patches(stream)
        net.forward(Tensor(noisy, dtype=net.dtype))


def train_denoiser(net, dataset, schedule, log_every=0):
    """Train on noisy/clean patch pairs with the plain-SGD schedule.

    After bn_freeze_frac of the iterations the batch-norm statistics are
    recalibrated at a larger patch size and pinned; the remaining
    iterations optimize the exact eval-mode function. Returns a
    TrainingLog; initial_eval/final_eval hold the eval-mode loss on a
    fixed held-out batch drawn from the stream before training.
    """
    if not isinstance(dataset, PatchStream):
        raise TypeError("train_denoiser expects a PatchStream")
    if not dataset.images:
        raise ValueError("empty dataset")
    schedule.validate()

    holdout_noisy, holdout_clean = dataset.holdout_batch()

    def eval_loss():
        net.eval()
        loss = ops.mse_loss(net.forward(Tensor(holdout_noisy, dtype=net.dtype)),
                            Tensor(holdout_clean, dtype=net.dtype))
        net.train()
        return loss.item()

    tlog = TrainingLog()
    tlog.initial_eval = eval_loss()
    params = net.parameters()
    freeze_at = int(schedule.total_iters * schedule.bn_freeze_frac)
    recal_patch = schedule.bn_recal_patch or 2 * schedule.patch_size
    net.train()
    for it in range(schedule.total_iters):
        if it == freeze_at and freeze_at < schedule.total_iters:
            if schedule.bn_recal_batches:
                recalibrate_bn_stats(net, dataset, recal_patch,
                                     batches=schedule.bn_recal_batches)
            net.set_bn_stats_frozen(True)
            log.info("iter %d: batch-norm statistics recalibrated and frozen", it)
        noisy, clean = sample_patches(dataset)
        lr = schedule.lr_at(it)
        with Tape():
            pred = net.forward(Tensor(noisy, dtype=net.dtype))
            loss = ops.mse_loss(pred, Tensor(clean, dtype=net.dtype))
        backward(loss)
        ops.sgd_step(params, lr)
        tlog.append(it, loss.item(), loss_d=loss.item(), lr=lr)
        if log_every and it % log_every == 0:
            log.info("iter %d: mse %.6f lr %.2e", it, loss.item(), lr)
    net.set_bn_stats_frozen(False)
    tlog.final_eval = eval_loss()
    return tlog
