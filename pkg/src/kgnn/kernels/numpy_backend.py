"""Vectorized numpy fallbacks for the convolution/pooling hot kernels.

Convolutions go through an im2col buffer and one BLAS matmul; the
scatter in col2im is a loop over the k*k kernel offsets, so every
slice assignment is disjoint and the accumulation order is fixed.
"""

import numpy as np

NAME = "numpy"


def _pad4(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, k, stride, h_out, w_out):
    b, c_in = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c_in, k, k, h_out, w_out), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride,
                                  j:j + stride * w_out:stride]
    return cols


def conv2d_forward(x, w, stride, pad):
    b, _, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    xp = _pad4(x, pad)
    cols = _im2col(xp, k, stride, h_out, w_out).reshape(b, c_in * k * k, h_out * w_out)
    y = np.tensordot(w.reshape(c_out, -1), cols, axes=([1], [1]))
    return np.ascontiguousarray(y.transpose(1, 0, 2)).reshape(b, c_out, h_out, w_out)


def conv2d_backward(x, w, stride, pad, gy):
    b, _, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    h_out, w_out = gy.shape[2], gy.shape[3]
    xp = _pad4(x, pad)
    cols = _im2col(xp, k, stride, h_out, w_out).reshape(b, c_in * k * k, h_out * w_out)
    gy2 = gy.reshape(b, c_out, h_out * w_out)

    gw = np.tensordot(gy2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)

    gcols = np.tensordot(gy2, w.reshape(c_out, -1), axes=([1], [0]))
    gcols = np.ascontiguousarray(gcols.transpose(0, 2, 1))
    gcols = gcols.reshape(b, c_in, k, k, h_out, w_out)
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * h_out:stride,
                j:j + stride * w_out:stride] += gcols[:, :, i, j]
    if pad == 0:
        return gxp, gw
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd]), gw


def maxpool2_forward(x):
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    # np.argmax picks the first maximum, i.e. scan order (0,0),(0,1),(1,0),(1,1)
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(idx, gy, h, w):
    b, c, ho, wo = gy.shape
    gwin = np.zeros((b, c, ho, wo, 4), dtype=np.float64)
    np.put_along_axis(gwin, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = gwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
    return np.ascontiguousarray(gx)
