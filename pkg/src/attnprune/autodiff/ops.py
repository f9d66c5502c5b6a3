"""Differentiable operators.

Convolutions are cross-correlations (no kernel flip). Feature maps are NCHW.
Every function returns a new :class:`Tensor` and records its backward rule on
the active tape when any input requires gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, InvalidInputError
from .tensor import Tensor, record


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _out_extent(size, k, stride, pad, where):
    out = (size + 2 * pad - k) // stride + 1
    if out <= 0:
        raise DimensionError(where, "positive output extent", out, f"input {size}, kernel {k}, stride {stride}, pad {pad}")
    return out


def _windows(xp, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) view over the padded input
    w = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _unpad(g, pad):
    if pad == 0:
        return g
    return g[:, :, pad:-pad, pad:-pad]


def conv2d(x, weight, bias=None, stride=1, padding=0, name="conv2d"):
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(name, "4-d NCHW input", x.shape)
    if weight.ndim != 4:
        raise DimensionError(name, "kernel C_out x C_in x H_k x W_k", weight.shape)
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(name, f"{ci} input channels", c)
    if bias is not None and bias.shape != (co,):
        raise DimensionError(name, f"bias of shape ({co},)", bias.shape)
    ho = _out_extent(h, kh, stride, padding, name)
    wo = _out_extent(w, kw, stride, padding, name)

    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, Co
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(weight.data[:, :, i, j], g, axes=([0], [1]))  # Ci, N, Ho, Wo
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(1, 0, 2, 3)
            gx = _unpad(gxp, padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return record(Tensor(out), inputs, backward)


def depthwise_conv2d(x, weight, stride=1, padding=0, name="depthwise_conv2d"):
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(name, "4-d NCHW input", x.shape)
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise DimensionError(name, "kernel C x 1 x H_k x W_k", weight.shape)
    if weight.shape[0] != c:
        raise DimensionError(name, f"{weight.shape[0]} channels", c)
    kh, kw = weight.shape[2:]
    ho = _out_extent(h, kh, stride, padding, name)
    wo = _out_extent(w, kw, stride, padding, name)

    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    k = weight.data[:, 0]
    out = np.einsum("nchwij,cij->nchw", win, k)

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.einsum("nchw,nchwij->cij", g, win)[:, None]
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * k[None, :, i, j, None, None]
            gx = _unpad(gxp, padding)
        return gx, gw

    return record(Tensor(out), (x, weight), backward)


def linear(x, weight, bias=None, name="linear"):
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(name, "N x C_in input and C_out x C_in weight", (x.shape, weight.shape))
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(name, f"{weight.shape[1]} input features", x.shape[1])
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(name, f"bias of shape ({weight.shape[0]},)", bias.shape)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return record(Tensor(out), inputs, backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training=False, momentum=0.1, eps=1e-5, name="batchnorm"):
    """Batch normalization over every axis except the channel axis 1.

    In training mode the running statistics (plain arrays or Tensors) are
    updated in place: ``running = (1 - momentum) * running + momentum * batch``,
    with the unbiased batch variance.
    """
    x = _as_tensor(x)
    if eps <= 0:
        raise InvalidInputError("batchnorm epsilon must be positive")
    if x.ndim not in (2, 4):
        raise DimensionError(name, "N x C or NCHW input", x.shape)
    c = x.shape[1]
    for t, label in ((gamma, "gamma"), (beta, "beta")):
        if t.shape != (c,):
            raise DimensionError(name, f"{label} of shape ({c},)", t.shape)
    rm = running_mean.data if isinstance(running_mean, Tensor) else running_mean
    rv = running_var.data if isinstance(running_var, Tensor) else running_var
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    count = x.size // c if x.size else 0

    if training:
        if count == 0:
            raise InvalidInputError(f"{name}: empty batch in train mode")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        rm *= 1.0 - momentum
        rm += momentum * mean
        rv *= 1.0 - momentum
        rv += momentum * unbiased
    else:
        mean, var = rm, rv
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m1 = gxhat.mean(axis=axes, keepdims=True)
                m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - m1 - xhat * m2) * inv.reshape(bshape)
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gg, gbeta

    return record(Tensor(out), (x, gamma, beta), backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return record(Tensor(out), (x,), backward)


def clipped_relu(x, ceiling=1.0):
    """min(max(x, 0), ceiling); the derivative is 0 at both kinks."""
    x = _as_tensor(x)
    if ceiling <= 0:
        raise InvalidInputError("clipped_relu ceiling must be positive")
    mask = (x.data > 0) & (x.data < ceiling)
    out = np.clip(x.data, 0, ceiling).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return record(Tensor(out), (x,), backward)


def activation(x, kind="relu", ceiling=1.0):
    if kind == "relu":
        return relu(x)
    if kind == "clipped_relu":
        return clipped_relu(x, ceiling)
    raise InvalidInputError(f"unknown activation {kind!r}")


def sigmoid(x):
    x = _as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return record(Tensor(out), (x,), backward)


def softmax(x):
    """Row-wise softmax of an N x C tensor, shifted by the row max."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError("softmax", "N x C input with C >= 1", x.shape)
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record(Tensor(out), (x,), backward)


def global_average_pool(x):
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("global_average_pool", "NCHW input", x.shape)
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return record(Tensor(out), (x,), backward)


def max_pool2d(x, kernel=2, stride=None, padding=0):
    x = _as_tensor(x)
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = _out_extent(h, kernel, stride, padding, "max_pool2d")
    wo = _out_extent(w, kernel, stride, padding, "max_pool2d")
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride)[:, :, :ho, :wo].reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, kernel)
        nn_, cc, ii, jj = np.indices(arg.shape)
        np.add.at(gxp, (nn_, cc, ii * stride + di, jj * stride + dj), g)
        return (_unpad(gxp, padding),)

    return record(Tensor(out), (x,), backward)


def channel_scale(x, scale):
    """out[n, c, ...] = x[n, c, ...] * scale[n, c]."""
    x, scale = _as_tensor(x), _as_tensor(scale)
    if x.ndim not in (2, 4) or scale.ndim != 2 or x.shape[:2] != scale.shape:
        raise DimensionError("channel_scale", f"scale of shape {x.shape[:2]}", scale.shape)
    s = scale.data if x.ndim == 2 else scale.data[:, :, None, None]
    out = x.data * s

    def backward(g):
        gx = g * s if x.requires_grad else None
        gs = None
        if scale.requires_grad:
            gs = g * x.data
            if x.ndim == 4:
                gs = gs.sum(axis=(2, 3))
        return gx, gs

    return record(Tensor(out), (x, scale), backward)


def index_select_channels(x, index):
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    out = x.data[:, index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, index] = g
        return (gx,)

    return record(Tensor(out), (x,), backward)


def flatten(x):
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        return (g.reshape(shape),)

    return record(Tensor(out), (x,), backward)


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        return g, g

    return record(Tensor(out), (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        return g * b.data, g * a.data

    return record(Tensor(out), (a, b), backward)


def scale(x, factor):
    """Multiply by a fixed scalar (not differentiated)."""
    x = _as_tensor(x)
    out = x.data * x.dtype.type(factor)

    def backward(g):
        return (g * x.dtype.type(factor),)

    return record(Tensor(out), (x,), backward)


def sum(x):
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return record(Tensor(out), (x,), backward)


def cross_entropy_loss(logits, labels):
    """Mean negative log-softmax probability of the true class."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy_loss", f"{logits.shape[0]} labels", labels.shape)
    n, k = logits.shape
    if n == 0:
        raise InvalidInputError("cross_entropy_loss: empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidInputError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record(Tensor(out), (logits,), backward)
