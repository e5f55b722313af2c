"""Fused differentiable operations built on :mod:`adapter.ndcore.tensor`."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from adapter.errors import NumericError, ParameterError, ShapeError
from adapter.ndcore import kernels
from adapter.ndcore.tensor import Tensor, _add_flops, as_tensor

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax received NaN input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), _back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("log_softmax received NaN input")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), _back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm over extent {n} got gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(x.ndim - 1))

    def _back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gain, bias), _back)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return Tensor._result(xd * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor, approximate: str = "none") -> Tensor:
    """GELU. ``approximate="none"`` is the erf form, ``"tanh"`` the fast one."""
    xd = x.data
    if approximate == "none":
        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        out = xd * cdf
        grad = cdf + xd * pdf
    elif approximate == "tanh":
        inner = _SQRT_2_OVER_PI * (xd + 0.044715 * xd ** 3)
        t = np.tanh(inner)
        out = 0.5 * xd * (1.0 + t)
        grad = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xd * xd)
    else:
        raise ParameterError(f"unknown GELU approximation {approximate!r}")
    out = out.astype(xd.dtype, copy=False)
    grad = grad.astype(xd.dtype, copy=False)
    return Tensor._result(out, (x,), lambda g: (g * grad,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "gelu_tanh":
        return gelu(x, approximate="tanh")
    raise ParameterError(f"unknown activation {kind!r}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (C,H,W) or (B,C,H,W) with ``weight`` (O,C,kh,kw)."""
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (B,C,H,W) input and (O,C,kh,kw) weight, got {x.shape}, {weight.shape}")
    b, c, h, w = xd.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid stride {stride} / padding {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else np.ascontiguousarray(xd)
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(cols, wmat.T)
    _add_flops(2 * b * ho * wo * wmat.shape[1] * cout)
    out = out.transpose(0, 2, 1).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def _back(g):
        g = g.reshape(b, cout, ho * wo).transpose(0, 2, 1)
        gw = np.tensordot(g, cols, axes=([0, 1], [0, 1])).reshape(weight.shape)
        gcols = np.ascontiguousarray(np.matmul(g, wmat))
        gx = kernels.col2im(gcols, (b, c, hp, wp), kh, kw, stride)
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        gx = gx[0] if unbatched else gx
        gb = g.sum(axis=(0, 1)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(out, parents, _back)


def max_pool2d(x: Tensor, window: int, stride: int = None, padding: int = 0) -> Tensor:
    """Max pooling; the gradient is routed only to each window's (first) maximum."""
    if window < 1:
        raise ParameterError(f"pooling window must be >= 1, got {window}")
    stride = window if stride is None else stride
    if stride < 1:
        raise ParameterError(f"pooling stride must be >= 1, got {stride}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    b, c, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if window > hp or window > wp:
        raise ShapeError(f"pooling window {window} larger than padded input {hp}x{wp}")
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    else:
        xp = np.ascontiguousarray(xd)
    out, argmax = kernels.maxpool_forward(xp, window, stride)
    if unbatched:
        out = out[0]

    def _back(g):
        g4 = np.ascontiguousarray(g[None] if unbatched else g)
        gx = kernels.maxpool_backward(g4, argmax, hp, wp)
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        return (gx[0] if unbatched else gx,)

    return Tensor._result(out, (x,), _back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B,C)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy needs (B,C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    out = np.asarray(-logp[rows, labels].mean(), dtype=ld.dtype)

    def _back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / len(labels)),)

    return Tensor._result(out, (logits,), _back)
