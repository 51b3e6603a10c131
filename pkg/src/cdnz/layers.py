"""Parameterized building blocks shared by the denoiser and the task heads.

A :class:`Module` owns named parameters, named buffers (non-trained state
such as batch-norm running statistics) and child modules. Parameter names
are full dotted paths fixed at construction time, so checkpoints are stable
and two builds from the same seed are bit-identical.
"""

import math

import numpy as np

from . import ops
from .tensor import Parameter


class Module:
    def __init__(self):
        self.training = True
        self._params = []
        self._buffers = {}
        self._children = []

    def add_param(self, name, array, trainable=True):
        p = Parameter(name, array, trainable=trainable)
        self._params.append(p)
        return p

    def add_buffer(self, name, array):
        arr = np.ascontiguousarray(array)
        self._buffers[name] = arr
        return arr

    def add_child(self, module):
        self._children.append(module)
        return module

    def parameters(self):
        """All parameters, own first then children, in registration order."""
        out = list(self._params)
        for ch in self._children:
            out.extend(ch.parameters())
        return out

    def named_buffers(self):
        out = dict(self._buffers)
        for ch in self._children:
            out.update(ch.named_buffers())
        return out

    def train(self, flag=True):
        self.training = flag
        for ch in self._children:
            ch.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def modules(self):
        yield self
        for ch in self._children:
            yield from ch.modules()

    def num_params(self):
        return sum(p.value.size for p in self.parameters())

    def state_arrays(self):
        """Ordered name -> array mapping of parameters and buffers."""
        out = {p.name: p.value.data for p in self.parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, arrays):
        state = self.state_arrays()
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, dst in state.items():
            src = np.asarray(arrays[name])
            if src.shape != dst.shape:
                raise ValueError(f"{name}: shape {src.shape} != expected {dst.shape}")
            dst[...] = src.astype(dst.dtype, copy=False)


class Conv2d(Module):
    """Convolution layer; weights are fan-in-scaled Gaussian, biases zero."""

    def __init__(self, name, rng, in_ch, out_ch, kernel, stride=1, pad=0, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel))
        self.w = self.add_param(f"{name}.w", w.astype(dtype))
        self.b = self.add_param(f"{name}.b", np.zeros(out_ch, dtype=dtype))

    def forward(self, x):
        return ops.conv2d(x, self.w.value, self.b.value, self.stride, self.pad)


class ConvTranspose2d(Module):
    """4x4 stride-2 transposed convolution (spatial size doubles)."""

    def __init__(self, name, rng, in_ch, out_ch, dtype=np.float32):
        super().__init__()
        fan_in = in_ch * 16
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (in_ch, out_ch, 4, 4))
        self.w = self.add_param(f"{name}.w", w.astype(dtype))
        self.b = self.add_param(f"{name}.b", np.zeros(out_ch, dtype=dtype))

    def forward(self, x):
        return ops.conv_transpose2d(x, self.w.value, self.b.value)


class BatchNorm2d(Module):
    """``stats_frozen`` pins the running statistics: the forward pass then
    normalizes with them even in training mode (gamma/beta still learn),
    which removes the train/eval normalization gap for late-phase training."""

    def __init__(self, name, channels, dtype=np.float32, eps=1e-5, momentum=0.9):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.stats_frozen = False
        self.gamma = self.add_param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.add_buffer(f"{name}.running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer(f"{name}.running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        mode = "train" if self.training and not self.stats_frozen else "eval"
        return ops.batch_norm(x, self.gamma.value, self.beta.value,
                              self.running_mean, self.running_var, mode,
                              eps=self.eps, momentum=self.momentum)


class Linear(Module):
    def __init__(self, name, rng, in_features, out_features, dtype=np.float32):
        super().__init__()
        w = rng.normal(0.0, math.sqrt(2.0 / in_features), (in_features, out_features))
        self.w = self.add_param(f"{name}.w", w.astype(dtype))
        self.b = self.add_param(f"{name}.b", np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        return ops.linear(x, self.w.value, self.b.value)
