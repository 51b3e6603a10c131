# cython: boundscheck=False, wraparound=False, cdivision=True
# Compiled versions of the hot kernels. Must stay bit-identical to the numpy
# fallback in _py.py: same (C*kh*kw, N*OH*OW) column layout for im2col and
# the same per-cell accumulation order (ky, kx ascending) for col2im.

import numpy as np

cimport cython
cimport numpy as cnp
from libc.string cimport memcpy

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _ox_lo(Py_ssize_t kx, Py_ssize_t pad, Py_ssize_t stride) nogil:
    cdef Py_ssize_t num = pad - kx
    if num <= 0:
        return 0
    return (num + stride - 1) // stride


cdef inline Py_ssize_t _ox_hi(Py_ssize_t kx, Py_ssize_t pad, Py_ssize_t stride,
                              Py_ssize_t w, Py_ssize_t ow) nogil:
    cdef Py_ssize_t num = w - 1 - kx + pad
    if num < 0:
        return 0
    cdef Py_ssize_t hi = num // stride + 1
    return hi if hi < ow else ow


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if real is float:
        out_arr = np.zeros((c * kh * kw, n * oh * ow), dtype=np.float32)
    else:
        out_arr = np.zeros((c * kh * kw, n * oh * ow), dtype=np.float64)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t r, ci, ky, kx, i, oy, iy, ox, lo, hi, row0, base
    with nogil:
        for r in range(c * kh * kw):
            ci = r // (kh * kw)
            ky = (r // kw) % kh
            kx = r % kw
            lo = _ox_lo(kx, pad, stride)
            hi = _ox_hi(kx, pad, stride, w, ow)
            base = kx - pad
            for i in range(n):
                for oy in range(oh):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    row0 = (i * oh + oy) * ow
                    if stride == 1:
                        if hi > lo:
                            memcpy(&out[r, row0 + lo], &x[i, ci, iy, base + lo],
                                   (hi - lo) * sizeof(real))
                    else:
                        for ox in range(lo, hi):
                            out[r, row0 + ox] = x[i, ci, iy, base + ox * stride]
    return out_arr


def col2im(real[:, ::1] col, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if real is float:
        img_arr = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        img_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] img = img_arr
    cdef Py_ssize_t ci, ky, kx, i, oy, iy, ox, lo, hi, row0, base, r
    with nogil:
        # (ky, kx) ascending per cell keeps float accumulation order equal
        # to the numpy fallback's slab loop.
        for ky in range(kh):
            for kx in range(kw):
                lo = _ox_lo(kx, pad, stride)
                hi = _ox_hi(kx, pad, stride, w, ow)
                base = kx - pad
                for ci in range(c):
                    r = (ci * kh + ky) * kw + kx
                    for i in range(n):
                        for oy in range(oh):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            row0 = (i * oh + oy) * ow
                            for ox in range(lo, hi):
                                img[i, ci, iy, base + ox * stride] += col[r, row0 + ox]
    return img_arr


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h // 2, ow = w // 2
    if real is float:
        out_arr = np.empty((n, c, oh, ow), dtype=np.float32)
    else:
        out_arr = np.empty((n, c, oh, ow), dtype=np.float64)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t i, ci, oy, ox, dy, dx, best_k
    cdef real v, best
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        best = x[i, ci, 2 * oy, 2 * ox]
                        best_k = 0
                        for dy in range(2):
                            for dx in range(2):
                                v = x[i, ci, 2 * oy + dy, 2 * ox + dx]
                                if v > best:
                                    best = v
                                    best_k = 2 * dy + dx
                        out[i, ci, oy, ox] = best
                        idx[i, ci, oy, ox] = best_k
    return out_arr, idx_arr


def maxpool2_backward(real[:, :, :, ::1] g, cnp.int64_t[:, :, :, ::1] idx,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    if real is float:
        gx_arr = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        gx_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t i, ci, oy, ox, k
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        k = idx[i, ci, oy, ox]
                        gx[i, ci, 2 * oy + k // 2, 2 * ox + k % 2] = g[i, ci, oy, ox]
    return gx_arr
