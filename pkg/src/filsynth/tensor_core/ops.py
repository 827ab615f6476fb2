"""Network layer operations recorded on the tape.

Images are channel-first ``[C, H, W]`` with no batch axis; training runs
with one example at a time.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import record

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv_transpose_out_size(n, k, stride, pad):
    return (n - 1) * stride - 2 * pad + k


def _im2col(x, k, stride, pad):
    c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo), ho, wo


def _col2im(cols, c, h, w, k, stride, pad, ho, wo):
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return xp[:, pad:pad + h, pad:pad + w]


def _check_conv_args(x, kernel, bias, stride, n_out):
    if x.ndim != 3:
        raise ValueError(f"expected a [C, H, W] input, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"expected a square 4-d kernel, got shape {kernel.shape}")
    if kernel.shape[1 - n_out] != x.shape[0]:
        raise ValueError(
            f"kernel expects {kernel.shape[1 - n_out]} input channels but input has {x.shape[0]}"
        )
    if bias.shape != (kernel.shape[n_out],):
        raise ValueError(f"bias shape {bias.shape} does not match {kernel.shape[n_out]} output channels")
    if stride < 1:
        raise ValueError("stride must be >= 1")


def conv2d(x, kernel, bias, stride=1, pad=0):
    """Zero-padded 2-d cross-correlation. ``kernel`` is ``[C_out, C_in, k, k]``."""
    _check_conv_args(x, kernel, bias, stride, n_out=0)
    c_out, c_in, k, _ = kernel.shape
    _, h, w = x.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"input {h}x{w} with pad {pad} is smaller than kernel {k}")
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    kmat = kernel.data.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, ho, wo) + bias.data[:, None, None]

    def backward(g):
        gm = g.reshape(c_out, -1)
        dx = _col2im(kmat.T @ gm, c_in, h, w, k, stride, pad, ho, wo) if x.requires_grad else None
        dk = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        return dx, dk, gm.sum(axis=1)

    return record(out, (x, kernel, bias), backward)


def conv_transpose2d(x, kernel, bias, stride=1, pad=0):
    """Adjoint of :func:`conv2d`. ``kernel`` is ``[C_in, C_out, k, k]``."""
    _check_conv_args(x, kernel, bias, stride, n_out=1)
    c_in, c_out, k, _ = kernel.shape
    _, h, w = x.shape
    ho = conv_transpose_out_size(h, k, stride, pad)
    wo = conv_transpose_out_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError("transposed convolution output would be empty")
    kmat = kernel.data.reshape(c_in, -1)
    xm = x.data.reshape(c_in, -1)
    out = _col2im(kmat.T @ xm, c_out, ho, wo, k, stride, pad, h, w) + bias.data[:, None, None]

    def backward(g):
        gcols, _, _ = _im2col(g, k, stride, pad)
        dx = (kmat @ gcols).reshape(x.shape) if x.requires_grad else None
        dk = (xm @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        return dx, dk, g.sum(axis=(1, 2))

    return record(out, (x, kernel, bias), backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch norm at inference."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels, dtype=np.float32, momentum=BN_MOMENTUM):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum)


def batch_norm(x, gamma, beta, eps=BN_EPS, mode="train", state=None):
    """Normalize each channel (axis 0) over all remaining axes."""
    if eps <= 0:
        raise ValueError("batch_norm eps must be > 0")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have length {c}")
    axes = tuple(range(1, x.ndim))
    bshape = (c,) + (1,) * (x.ndim - 1)
    d = x.data
    dt = d.dtype
    gm = gamma.data.reshape(bshape)
    if mode == "train":
        mu = d.mean(axis=axes, dtype=np.float64).astype(dt)
        centered = d - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes, dtype=np.float64).astype(dt)
        inv = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
        xhat = centered * inv.reshape(bshape)
        if state is not None:
            m = state.momentum
            state.mean[...] = m * state.mean + (1 - m) * mu
            state.var[...] = m * state.var + (1 - m) * var
        n = d.size // c

        def backward(g):
            dxhat = g * gm
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (inv.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "infer":
        if state is None:
            raise ValueError("batch_norm in infer mode needs running stats")
        inv = (1.0 / np.sqrt(state.var.astype(dt) + dt.type(eps))).astype(dt)
        xhat = (d - state.mean.astype(dt).reshape(bshape)) * inv.reshape(bshape)

        def backward(g):
            return g * gm * inv.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    out = xhat * gm + beta.data.reshape(bshape)
    return record(out.astype(dt, copy=False), (x, gamma, beta), backward)


def leaky_relu(x, slope=LEAKY_SLOPE):
    d = x.data
    pos = d >= 0
    s = d.dtype.type(slope)
    return record(np.where(pos, d, d * s), (x,), lambda g: (np.where(pos, g, g * s),))


def tanh(x):
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x):
    half = x.data.dtype.type(0.5)
    y = half * (1 + np.tanh(half * x.data))
    return record(y, (x,), lambda g: (g * y * (1 - y),))


def activation(x, kind, slope=LEAKY_SLOPE):
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def affine(x, weight, bias):
    """``weight @ x + bias`` for a vector ``x``."""
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ValueError(f"affine: cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"affine: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    return record(wd @ xd + bias.data, (x, weight, bias), lambda g: (wd.T @ g, np.outer(g, xd), g))


def concat_channels(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels: spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return record(out, (a, b), lambda g: (g[:ca], g[ca:]))


def avg_pool2d(x, size=2):
    c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"avg_pool2d: {h}x{w} is not divisible by {size}")
    out = x.data.reshape(c, h // size, size, w // size, size).mean(axis=(2, 4))
    scale = x.data.dtype.type(1.0 / (size * size))

    def backward(g):
        return (np.repeat(np.repeat(g, size, axis=1), size, axis=2) * scale,)

    return record(out.astype(x.data.dtype, copy=False), (x,), backward)


def bce_with_logits(logits, target, weight=None):
    """Weighted mean binary cross-entropy on raw logits.

    ``target`` and ``weight`` are constant arrays shaped like ``logits``;
    the mean is taken over the total weight.
    """
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    w = np.ones_like(z) if weight is None else np.asarray(weight, dtype=z.dtype)
    if t.shape != z.shape or w.shape != z.shape:
        raise ValueError("bce_with_logits: target/weight must match logits")
    total = float(w.sum(dtype=np.float64))
    if total <= 0:
        raise ValueError("bce_with_logits: total weight must be positive")
    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    val = np.asarray((w * (softplus - t * z)).sum(dtype=np.float64) / total, dtype=z.dtype)
    half = z.dtype.type(0.5)

    def backward(g):
        p = half * (1 + np.tanh(half * z))
        return (g * w * (p - t) / z.dtype.type(total),)

    return record(val, (logits,), backward)
