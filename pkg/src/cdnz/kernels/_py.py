"""Pure-numpy versions of the hot kernels.

Same call signatures and bit-identical results as the compiled backend in
``_cy.pyx``; selected automatically when the extension is not built (see
``cdnz.kernels``).

im2col uses a transposed column layout: row r = (c*kh + ky)*kw + kx,
column index = (n*OH + oy)*OW + ox. The result is C-contiguous, and its
transpose feeds BLAS directly without another copy.
"""

import numpy as np


def im2col(x, kh, kw, stride, pad):
    """Unfold (N,C,H,W) into a (C*kh*kw, N*OH*OW) patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad > 0:
        x = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    xt = x.transpose(1, 0, 2, 3)
    col = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        y_max = ky + stride * oh
        for kx in range(kw):
            x_max = kx + stride * ow
            col[:, ky, kx] = xt[:, :, ky:y_max:stride, kx:x_max:stride]
    return col.reshape(c * kh * kw, n * oh * ow)


def col2im(col, shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add the patch matrix back to (N,C,H,W).

    Per-cell accumulation runs over (ky, kx) in ascending row-major order;
    the compiled backend uses the same order so results match bitwise.
    """
    n, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    col6 = col.reshape(c, kh, kw, n, oh, ow)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    imgt = img.transpose(1, 0, 2, 3)
    for ky in range(kh):
        y_max = ky + stride * oh
        for kx in range(kw):
            x_max = kx + stride * ow
            imgt[:, :, ky:y_max:stride, kx:x_max:stride] += col6[:, ky, kx]
    if pad > 0:
        img = np.ascontiguousarray(img[:, :, pad:h + pad, pad:w + pad])
    return img


def maxpool2_forward(x):
    """2x2 stride-2 max pool. Returns (out, idx) where idx in [0,4) is the
    row-major in-window position of the first maximum."""
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = np.ascontiguousarray(v).reshape(n, c, h // 2, w // 2, 4)
    idx = v.argmax(axis=4).astype(np.int64)
    out = np.take_along_axis(v, idx[..., None], axis=4)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(g, idx, h, w):
    """Route pooled gradients back to the argmax positions."""
    n, c, oh, ow = g.shape
    buf = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
    np.put_along_axis(buf, idx[..., None], g[..., None], axis=4)
    buf = buf.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(buf).reshape(n, c, h, w)
