"""Hot-loop kernels with two interchangeable backends.

The compiled Cython backend is used when available; otherwise the numpy
fallback. Set CDNZ_KERNEL_BACKEND=python or =cython to force one (the bench
script and the parity tests use this). Both backends produce bit-identical
results for float32 and float64 inputs.
"""

import os

import numpy as np

from . import _py

try:
    from . import _cy
except ImportError:
    _cy = None

_BACKENDS = {"python": _py, "cython": _cy}


def get_backend(name):
    """Return the backend module for 'python' or 'cython' (None if unbuilt)."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    return _BACKENDS[name]


def _select():
    forced = os.environ.get("CDNZ_KERNEL_BACKEND", "").strip().lower()
    if forced:
        impl = get_backend(forced)
        if impl is None:
            raise ImportError(
                "CDNZ_KERNEL_BACKEND=cython but the compiled extension is not built"
            )
        return forced, impl
    if _cy is not None:
        return "cython", _cy
    return "python", _py


_NAME, _IMPL = _select()


def backend_name():
    """Name of the backend selected at import ('cython' or 'python')."""
    return _NAME


def _as4d(x):
    return np.ascontiguousarray(x)


def im2col(x, kh, kw, stride, pad):
    return _IMPL.im2col(_as4d(x), kh, kw, stride, pad)


def col2im(col, shape, kh, kw, stride, pad):
    return _IMPL.col2im(np.ascontiguousarray(col), tuple(shape), kh, kw, stride, pad)


def maxpool2_forward(x):
    return _IMPL.maxpool2_forward(_as4d(x))


def maxpool2_backward(g, idx, h, w):
    return _IMPL.maxpool2_backward(_as4d(g), np.ascontiguousarray(idx), h, w)
