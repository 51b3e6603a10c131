"""Differentiable operations on :class:`~cdnz.tensor.Tensor`.

Each op computes its forward result in numpy, then registers a closure that
maps the output gradient to input gradients. Convolutions run as im2col /
col2im plus one BLAS matmul; 1x1 stride-1 convolutions skip the unfold and
go straight to the matmul. All reductions use single numpy calls, so the
reduction order is fixed and results are reproducible run to run.
"""

import numpy as np

from . import kernels
from .tensor import Parameter, Tensor, record_op


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_dtype(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed dtypes in op: {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a, b):
    """Elementwise sum; shapes must match exactly."""
    a, b = _t(a), _t(b)
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward_fn(g):
        return g, g

    return record_op((a, b), a.data + b.data, backward_fn)


def mul(a, b):
    """Elementwise product; shapes must match exactly."""
    a, b = _t(a), _t(b)
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g * bd, g * ad

    return record_op((a, b), ad * bd, backward_fn)


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = _t(x)
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return record_op((x,), x.data * c, backward_fn)


def concat_channels(a, b):
    """Stack along the channel axis; N, H, W must agree."""
    a, b = _t(a), _t(b)
    _check_same_dtype(a, b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: shape mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return record_op((a, b), np.concatenate([a.data, b.data], axis=1), backward_fn)


def relu(x):
    """max(0, x); the subgradient at 0 is taken as 0."""
    x = _t(x)
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return record_op((x,), np.where(mask, x.data, 0), backward_fn)


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    x = _t(x)
    shape, dtype = x.shape, x.dtype

    def backward_fn(g):
        return (np.full(shape, g, dtype=dtype),)

    return record_op((x,), x.data.sum(dtype=dtype), backward_fn)


# ---------------------------------------------------------------------------
# convolution

# unfolds smaller than this are kept alive for the backward pass
_COL_CACHE_BYTES = 64 << 20


def conv2d(x, weight, bias, stride=1, zero_pad=0):
    """2-D cross-correlation of NCHW input with (Cout,Cin,kH,kW) kernels.

    Output H' = floor((H + 2*zero_pad - kH)/stride) + 1, same for W'.
    Differentiable w.r.t. input, weight and bias.
    """
    x, weight, bias = _t(x), _t(weight), _t(bias)
    _check_same_dtype(x, weight, bias)
    xa, wa, ba = x.data, weight.data, bias.data
    if xa.ndim != 4 or wa.ndim != 4:
        raise ValueError("conv2d expects NCHW input and (Cout,Cin,kH,kW) weight")
    n, cin, h, w = xa.shape
    cout, cin_w, kh, kw = wa.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d: input has {cin} channels but weight expects {cin_w} "
            f"(input {xa.shape}, weight {wa.shape})"
        )
    if ba.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {ba.shape} != ({cout},)")
    if stride < 1 or zero_pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and zero_pad >= 0")
    if h + 2 * zero_pad < kh or w + 2 * zero_pad < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {zero_pad})")
    oh = (h + 2 * zero_pad - kh) // stride + 1
    ow = (w + 2 * zero_pad - kw) // stride + 1

    pointwise = kh == 1 and kw == 1 and stride == 1 and zero_pad == 0

    def unfold(arr):
        # (Cin*kH*kW, N*OH*OW); the transpose view feeds BLAS without a copy
        if pointwise:
            return np.ascontiguousarray(arr.transpose(1, 0, 2, 3)).reshape(cin, -1)
        return kernels.im2col(arr, kh, kw, stride, zero_pad)

    wmat = wa.reshape(cout, -1)
    cols = unfold(xa)
    out = cols.T @ wmat.T
    out += ba
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    # keep the unfold for the weight gradient unless it is too large
    cached = cols if cols.nbytes <= _COL_CACHE_BYTES else None
    del cols

    def backward_fn(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gw = None
        if weight.requires_grad:
            c = cached if cached is not None else unfold(xa)
            gw = (gmat @ c.T).reshape(wa.shape)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gmat
            if pointwise:
                gx = np.ascontiguousarray(
                    gcols.reshape(cin, n, oh, ow).transpose(1, 0, 2, 3))
            else:
                gx = kernels.col2im(gcols, xa.shape, kh, kw, stride, zero_pad)
        return gx, gw, gb

    return record_op((x, weight, bias), out, backward_fn)


def conv_transpose2d(x, weight, bias, stride=2, crop=1):
    """Stride-2 transposed convolution with 4x4 kernels; doubles H and W.

    ``weight`` has shape (Cin, Cout, 4, 4). With a symmetric crop of 1 this
    is exactly the adjoint of conv2d(stride=2, zero_pad=1) with 4x4 kernels.
    """
    x, weight, bias = _t(x), _t(weight), _t(bias)
    _check_same_dtype(x, weight, bias)
    xa, wa, ba = x.data, weight.data, bias.data
    if stride != 2 or crop != 1:
        raise ValueError("conv_transpose2d supports stride=2, crop=1 only")
    if xa.ndim != 4 or wa.ndim != 4 or wa.shape[2:] != (4, 4):
        raise ValueError("conv_transpose2d expects NCHW input and (Cin,Cout,4,4) weight")
    n, c, h, w = xa.shape
    if min(xa.shape) <= 0:
        raise ValueError(f"conv_transpose2d: non-positive input extent in {xa.shape}")
    c_w, cout = wa.shape[:2]
    if c != c_w:
        raise ValueError(
            f"conv_transpose2d: input has {c} channels but weight expects {c_w}")
    if ba.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {ba.shape} != ({cout},)")
    oh, ow = 2 * h, 2 * w

    wmat = wa.reshape(c, cout * 16)
    inmat = np.ascontiguousarray(xa.transpose(1, 0, 2, 3)).reshape(c, -1)
    out = kernels.col2im(wmat.T @ inmat, (n, cout, oh, ow), 4, 4, 2, 1)
    out += ba[:, None, None]

    def backward_fn(g):
        gcols = kernels.im2col(g, 4, 4, 2, 1)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gw = (inmat @ gcols.T).reshape(wa.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray(
                (wmat @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        return gx, gw, gb

    return record_op((x, weight, bias), out, backward_fn)


# ---------------------------------------------------------------------------
# normalization / pooling


def batch_norm(x, gamma, beta, running_mean, running_var, mode,
               eps=1e-5, momentum=0.9):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and folds them into the
    running buffers (new = momentum*old + (1-momentum)*batch); eval mode
    normalizes with the running buffers. ``running_mean``/``running_var``
    are plain numpy arrays mutated in place during train mode.
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    _check_same_dtype(x, gamma, beta)
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    xa = x.data
    n, c, h, w = xa.shape
    m = n * h * w
    if mode == "train":
        if m < 2:
            raise ValueError("batch_norm train mode needs at least 2 values per channel")
        mu = xa.mean(axis=(0, 2, 3))
        var = xa.var(axis=(0, 2, 3))
        running_mean[...] = momentum * running_mean + (1.0 - momentum) * mu
        running_var[...] = momentum * running_var + (1.0 - momentum) * var
    else:
        mu = running_mean.astype(xa.dtype, copy=False)
        var = running_var.astype(xa.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xa - mu[:, None, None]) * inv[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward_fn(g):
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[:, None, None]
            if mode == "train":
                s1 = gxhat.sum(axis=(0, 2, 3))
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (inv[:, None, None] / m) * (
                    m * gxhat - s1[:, None, None] - xhat * s2[:, None, None])
            else:
                gx = gxhat * inv[:, None, None]
        return gx, ggamma, gbeta

    return record_op((x, gamma, beta), out, backward_fn)


def max_pool2(x):
    """2x2 non-overlapping max pool; H and W must be even. On ties the first
    window element in row-major order receives the gradient."""
    x = _t(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 requires even H and W, got {h}x{w}")
    out, idx = kernels.maxpool2_forward(x.data)

    def backward_fn(g):
        return (kernels.maxpool2_backward(g, idx, h, w),)

    return record_op((x,), out, backward_fn)


def global_avg_pool(x):
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    x = _t(x)
    n, c, h, w = x.data.shape

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return record_op((x,), x.data.mean(axis=(2, 3)), backward_fn)


def linear(x, weight, bias):
    """Affine map (N,C) @ (C,K) + (K,)."""
    x, weight, bias = _t(x), _t(weight), _t(bias)
    _check_same_dtype(x, weight, bias)
    xa, wa = x.data, weight.data
    if xa.ndim != 2 or wa.ndim != 2 or xa.shape[1] != wa.shape[0]:
        raise ValueError(f"linear: incompatible shapes {xa.shape} @ {wa.shape}")

    def backward_fn(g):
        gx = g @ wa.T if x.requires_grad else None
        gw = xa.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record_op((x, weight, bias), xa @ wa + bias.data, backward_fn)


def subtract_channel_means(x, means):
    """Subtract a fixed per-channel mean (a plain array, not a Parameter)."""
    x = _t(x)
    means = np.asarray(means, dtype=x.dtype)

    def backward_fn(g):
        return (g,)

    return record_op((x,), x.data - means[:, None, None], backward_fn)


# ---------------------------------------------------------------------------
# padding / cropping (arbitrary-size inference support)


def reflect_pad2d(x, pad_h, pad_w):
    """Reflection-pad the bottom/right borders. Requires pad < extent."""
    x = _t(x)
    n, c, h, w = x.data.shape
    if pad_h >= h or pad_w >= w:
        raise ValueError(f"reflect_pad2d: pad ({pad_h},{pad_w}) too large for {h}x{w}")
    if pad_h == 0 and pad_w == 0:
        def backward_id(g):
            return (g,)
        return record_op((x,), x.data.copy(), backward_id)

    src_y = np.pad(np.arange(h), (0, pad_h), mode="reflect")
    src_x = np.pad(np.arange(w), (0, pad_w), mode="reflect")
    out = np.pad(x.data, [(0, 0), (0, 0), (0, pad_h), (0, pad_w)], mode="reflect")

    def backward_fn(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        iy = src_y[None, None, :, None]
        ix = src_x[None, None, None, :]
        np.add.at(gx, (np.arange(n)[:, None, None, None],
                       np.arange(c)[None, :, None, None], iy, ix), g)
        return (gx,)

    return record_op((x,), out, backward_fn)


def crop2d(x, height, width):
    """Keep the top-left height x width window."""
    x = _t(x)
    n, c, h, w = x.data.shape
    if height > h or width > w:
        raise ValueError(f"crop2d: target {height}x{width} exceeds input {h}x{w}")

    def backward_fn(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :height, :width] = g
        return (gx,)

    return record_op((x,), x.data[:, :, :height, :width].copy(), backward_fn)


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target):
    """Mean over all elements of the squared difference."""
    pred, target = _t(pred), _t(target)
    _check_same_dtype(pred, target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size

    def backward_fn(g):
        gd = (2.0 * g / count) * diff
        return gd, (-gd if target.requires_grad else None)

    return record_op((pred, target), np.mean(diff * diff, dtype=pred.dtype), backward_fn)


def cross_entropy_loss(logits, labels, ignore_label=None):
    """Mean of -log softmax(logits)[label] over non-ignored positions.

    ``logits`` is (N,K) for per-image labels or (N,K,H,W) for per-pixel
    labels. Numerically stabilized by max subtraction. When every position
    is ignored the loss is 0 with zero gradient.
    """
    logits = _t(logits)
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError("cross_entropy_loss: labels must be integers")
    la = logits.data
    if la.ndim == 2:
        k = la.shape[1]
        z = la
        flat_lab = lab.reshape(-1)
    elif la.ndim == 4:
        n, k, h, w = la.shape
        if lab.shape != (n, h, w):
            raise ValueError(
                f"cross_entropy_loss: label map {lab.shape} does not match logits {la.shape}")
        z = np.ascontiguousarray(la.transpose(0, 2, 3, 1)).reshape(-1, k)
        flat_lab = lab.reshape(-1)
    else:
        raise ValueError("cross_entropy_loss expects (N,K) or (N,K,H,W) logits")
    if lab.size != z.shape[0]:
        raise ValueError(f"cross_entropy_loss: {lab.size} labels for {z.shape[0]} rows")

    if ignore_label is None:
        valid = np.ones(flat_lab.shape, dtype=bool)
    else:
        valid = flat_lab != ignore_label
    checked = flat_lab[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= k):
        bad = checked[(checked < 0) | (checked >= k)][0]
        raise ValueError(f"cross_entropy_loss: label {bad} out of range [0, {k})")
    count = int(valid.sum())

    if count == 0:
        def backward_zero(g):
            return (np.zeros_like(la),)
        return record_op((logits,), np.asarray(0.0, dtype=la.dtype), backward_zero)

    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(z.shape[0])
    safe_lab = np.where(valid, flat_lab, 0)
    per_pos = lse - zs[rows, safe_lab]
    loss = per_pos[valid].mean(dtype=la.dtype)

    def backward_fn(g):
        p = np.exp(zs - lse[:, None])
        p[rows, safe_lab] -= 1.0
        p[~valid] = 0.0
        p *= g / count
        if la.ndim == 2:
            gl = p
        else:
            n, k4, h, w = la.shape
            gl = np.ascontiguousarray(p.reshape(n, h, w, k4).transpose(0, 3, 1, 2))
        return (gl.astype(la.dtype, copy=False),)

    return record_op((logits,), np.asarray(loss, dtype=la.dtype), backward_fn)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, lr):
    """Plain SGD: value <- value - lr * grad for trainable parameters.

    Non-trainable parameters are left bit-identical. All grads (including
    those of frozen parameters) are cleared afterwards, so accumulation
    never leaks across iterations.
    """
    if lr <= 0:
        raise ValueError(f"sgd_step: learning rate must be positive, got {lr}")
    for p in params:
        if not isinstance(p, Parameter):
            raise TypeError("sgd_step expects Parameter objects")
        if p.trainable:
            if p.value.grad is None:
                raise ValueError(f"sgd_step: trainable parameter {p.name!r} has no gradient")
            p.value.data -= lr * p.value.grad
    for p in params:
        p.value.grad = None


def step_decay_lr(lr0, iteration, decay_every):
    """lr0 divided by 10 after every ``decay_every`` iterations."""
    return lr0 * 10.0 ** (-(iteration // decay_every))
