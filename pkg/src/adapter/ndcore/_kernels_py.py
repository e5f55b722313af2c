"""Pure-numpy versions of the convolution and pooling kernels.

These are the reference implementations; ``_kernels.pyx`` must match them
exactly (including the first-maximum tie rule in pooling).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho * wo, c * kh * kw)


def col2im(cols, shape, kh, kw, stride):
    b, c, hp, wp = shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def maxpool_forward(xp, k, stride):
    b, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(b, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // k
    cols = np.arange(wo)[None, :] * stride + local % k
    return np.ascontiguousarray(out), (rows * wp + cols).astype(np.int64)


def maxpool_backward(grad, argmax, hp, wp):
    b, c = grad.shape[:2]
    base = (np.arange(b * c, dtype=np.int64) * (hp * wp))[:, None]
    flat = (base + argmax.reshape(b * c, -1)).ravel()
    out = np.zeros(b * c * hp * wp, dtype=grad.dtype)
    np.add.at(out, flat, grad.ravel())
    return out.reshape(b, c, hp, wp)
