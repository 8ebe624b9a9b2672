"""Differentiable operations.

Every function takes and returns :class:`Tensor`. Reductions run in a fixed
order (plain numpy reductions and single-threaded matmuls), so repeated calls
on identical inputs give bit-identical results.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _need(t):
    return t.requires_grad


# -- elementwise and reductions ------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if _need(a) else None,
            _unbroadcast(g, b.shape) if _need(b) else None,
        )

    return record(out, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if _need(a) else None,
            _unbroadcast(-g, b.shape) if _need(b) else None,
        )

    return record(out, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if _need(a) else None,
            _unbroadcast(g * a.data, b.shape) if _need(b) else None,
        )

    return record(out, (a, b), backward, "mul")


def sum(x):  # noqa: A001 - mirrors the numpy name on purpose
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return record(out, (x,), backward, "sum")


def mean(x):
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return record(out, (x,), backward, "mean")


def reshape(x, shape):
    out = x.data.reshape(shape)
    if out.size != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return record(out, (x,), backward, "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return record(out, (x,), backward, "relu")


def sigmoid(x):
    # Split by sign to avoid overflow in exp.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out * (1 - out),)

    return record(out, (x,), backward, "sigmoid")


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- layers ---------------------------------------------------------------------


def same_padding(size, kernel, stride):
    """TF-style 'same' padding: returns (out_size, pad_before, pad_after)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv_output_size(size, kernel, stride, padding):
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if size < kernel:
            raise ShapeError(f"valid convolution needs input >= kernel ({size} < {kernel})")
        return (size - kernel) // stride + 1
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """2-D cross-correlation over NCHW input with an FCkk weight."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if c != wc:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")

    if padding == "same":
        ho, pt, pb = same_padding(h, kh, stride)
        wo, pl, pr = same_padding(w, kw, stride)
    else:
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(w, kw, stride, padding)
        pt = pb = pl = pr = 0
    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gw = gb = None
        if _need(weight):
            gw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and _need(bias):
            gb = gm.sum(axis=0)
        if _need(x):
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            he = stride * (ho - 1) + 1
            we = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + he : stride, j : j + we : stride] += dcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
            gx = dxp[:, :, pt : pt + h, pl : pl + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(out, parents, backward, "conv2d")


def upsample_nearest2x(x):
    if x.data.ndim != 4:
        raise ShapeError(f"upsample expects NCHW input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record(out, (x,), backward, "upsample")


def max_pool2x2(x):
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool 2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        # Gradient goes to the first maximal element of each window only.
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=x.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        gx = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record(out, (x,), backward, "maxpool")


def global_avg_pool(x):
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return record(out, (x,), backward, "globalavgpool")


def pooling(x, kind):
    if kind == "max2x2":
        return max_pool2x2(x)
    if kind == "global_avg":
        return global_avg_pool(x)
    raise ValueError(f"unknown pooling {kind!r}")


def dense(x, weight, bias=None):
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if _need(x) else None
        gw = x.data.T @ g if _need(weight) else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if _need(bias) else None)

    return record(out, parents, backward, "dense")


def batchnorm2d(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over (N, H, W) per channel.

    In train mode ``running_mean``/``running_var`` (plain arrays) are
    updated in place; eval mode only reads them.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params must have shape ({c},)")
    shape = (1, c, 1, 1)
    if train:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = gb = gx = None
        if _need(gamma):
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if _need(beta):
            gb = g.sum(axis=(0, 2, 3))
        if _need(x):
            dxhat = g * gamma.data.reshape(shape)
            if train:
                m = n * h * w
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                gx = (inv_std.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(shape)
        return gx, gg, gb

    return record(out, (x, gamma, beta), backward, "batchnorm2d")


# -- probabilities and losses ---------------------------------------------------


def softmax_array(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    p = softmax_array(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record(p, (x,), backward, "softmax")


def _one_hot(target, shape, dtype):
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape == shape:
        return t.astype(dtype)
    if t.ndim != 1 or t.shape[0] != shape[0]:
        raise ShapeError(f"targets must be class indices of length {shape[0]} or one-hot {shape}")
    idx = t.astype(np.int64)
    if idx.min() < 0 or idx.max() >= shape[1]:
        raise ShapeError(f"class index out of range [0, {shape[1]})")
    out = np.zeros(shape, dtype=dtype)
    out[np.arange(shape[0]), idx] = 1
    return out


def softmax_cross_entropy(logits, target):
    """Mean cross-entropy of softmax(logits) against indices or one-hot rows."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross-entropy expects (N, K) logits, got {logits.shape}")
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("cross-entropy of an empty batch")
    onehot = _one_hot(target, logits.shape, logits.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = np.asarray(-(onehot * logp).sum() / n, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        return ((p * onehot.sum(axis=1, keepdims=True) - onehot) * (g / n),)

    return record(out, (logits,), backward, "softmax_cross_entropy")


def mse(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ShapeError("mse of an empty batch")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    n = pred.size

    def backward(g):
        d = diff * (2 * g / n)
        return (d if _need(pred) else None, -d if _need(target) else None)

    return record(out, (pred, target), backward, "mse")


def loss(pred, target, kind):
    if kind == "mse":
        return mse(pred, target)
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(pred, target)
    raise ValueError(f"unknown loss {kind!r}")
