"""JIT-compiled hot kernels: direct convolution and 2x2 max pooling.

Loops are ordered so the innermost index walks contiguous memory and
every reduction accumulates in a fixed order; results are therefore
reproducible bit-for-bit run to run.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _pad4(x, pad):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


@njit(cache=True)
def conv2d_forward(x, w, stride, pad):
    b, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    xp = _pad4(x, pad) if pad > 0 else x
    y = np.zeros((b, c_out, h_out, w_out))
    for bi in range(b):
        for co in range(c_out):
            for ci in range(c_in):
                for i in range(k):
                    for j in range(k):
                        wv = w[co, ci, i, j]
                        for ho in range(h_out):
                            hi = ho * stride + i
                            for wo in range(w_out):
                                y[bi, co, ho, wo] += wv * xp[bi, ci, hi, wo * stride + j]
    return y


@njit(cache=True)
def conv2d_backward(x, w, stride, pad, gy):
    b, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    h_out, w_out = gy.shape[2], gy.shape[3]
    xp = _pad4(x, pad) if pad > 0 else x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for bi in range(b):
        for co in range(c_out):
            for ci in range(c_in):
                for i in range(k):
                    for j in range(k):
                        wv = w[co, ci, i, j]
                        acc = 0.0
                        for ho in range(h_out):
                            hi = ho * stride + i
                            for wo in range(w_out):
                                g = gy[bi, co, ho, wo]
                                acc += g * xp[bi, ci, hi, wo * stride + j]
                                gxp[bi, ci, hi, wo * stride + j] += wv * g
                        gw[co, ci, i, j] += acc
    if pad == 0:
        return gxp, gw
    return gxp[:, :, pad:pad + h, pad:pad + wd].copy(), gw


@njit(cache=True)
def maxpool2_forward(x):
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    y = np.empty((b, c, ho, wo))
    idx = np.empty((b, c, ho, wo), np.uint8)
    for bi in range(b):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[bi, ci, 2 * i, 2 * j]
                    bpos = np.uint8(0)
                    for d in range(1, 4):
                        v = x[bi, ci, 2 * i + (d >> 1), 2 * j + (d & 1)]
                        if v > best:  # strict: ties keep the first scan position
                            best = v
                            bpos = np.uint8(d)
                    y[bi, ci, i, j] = best
                    idx[bi, ci, i, j] = bpos
    return y, idx


@njit(cache=True)
def maxpool2_backward(idx, gy, h, w):
    b, c, ho, wo = gy.shape
    gx = np.zeros((b, c, h, w))
    for bi in range(b):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    d = idx[bi, ci, i, j]
                    gx[bi, ci, 2 * i + (d >> 1), 2 * j + (d & 1)] = gy[bi, ci, i, j]
    return gx
