"""Differentiable operations on Tensors.

Everything here passes central finite-difference checks at float64 with
relative error below 1e-4 (see the gradient suite in the tests). Ops with
mode switches (dropout, batch norm) take the mode explicitly; there is no
global training flag.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import BadRate, BatchTooSmall, LabelOutOfRange, ShapeMismatch
from .tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data + b.data, req, parents=(a, b))
    if req:
        def _bw(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data * b.data, req, parents=(a, b))
    if req:
        def _bw(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * s, a.requires_grad, parents=(a,))
    if a.requires_grad:
        out._backward = lambda g: a.accumulate(g * s)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} @ {b.shape}")
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data @ b.data, req, parents=(a, b))
    if req:
        def _bw(g):
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)
        out._backward = _bw
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad, parents=(a,))
    if a.requires_grad:
        out._backward = lambda g: a.accumulate(g.reshape(a.shape))
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), a.requires_grad, parents=(a,))
    if a.requires_grad:
        out._backward = lambda g: a.accumulate(g.transpose(inverse))
    return out


def timestep(a, t: int) -> Tensor:
    """Select step t of a [batch, time, feat] tensor -> [batch, feat]."""
    a = as_tensor(a)
    out = Tensor(a.data[:, t, :], a.requires_grad, parents=(a,))
    if a.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            full[:, t, :] = g
            a.accumulate(full)
        out._backward = _bw
    return out


def slice_last(a, start: int, stop: int) -> Tensor:
    """Slice the final axis; used to split fused LSTM gate blocks."""
    a = as_tensor(a)
    out = Tensor(a.data[..., start:stop], a.requires_grad, parents=(a,))
    if a.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            a.accumulate(full)
        out._backward = _bw
    return out


def stack_time(steps) -> Tensor:
    """Stack a list of [batch, feat] tensors into [batch, time, feat]."""
    steps = [as_tensor(s) for s in steps]
    req = any(s.requires_grad for s in steps)
    data = np.stack([s.data for s in steps], axis=1)
    out = Tensor(data, req, parents=tuple(steps))
    if req:
        def _bw(g):
            for t, s in enumerate(steps):
                if s.requires_grad:
                    s.accumulate(g[:, t, :])
        out._backward = _bw
    return out


def concat_last(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    req = a.requires_grad or b.requires_grad
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), req, parents=(a, b))
    if req:
        split = a.shape[-1]
        def _bw(g):
            if a.requires_grad:
                a.accumulate(g[..., :split])
            if b.requires_grad:
                b.accumulate(g[..., split:])
        out._backward = _bw
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0), a.requires_grad, parents=(a,))
    if a.requires_grad:
        out._backward = lambda g: a.accumulate(g * (a.data > 0))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y, a.requires_grad, parents=(a,))
    if a.requires_grad:
        out._backward = lambda g: a.accumulate(g * (1.0 - y * y))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, a.requires_grad, parents=(a,))
    if a.requires_grad:
        out._backward = lambda g: a.accumulate(g * y * (1.0 - y))
    return out


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad, parents=(a,))
    if a.requires_grad:
        def _bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.shape).copy())
        out._backward = _bw
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.mean()), a.requires_grad, parents=(a,))
    if a.requires_grad:
        out._backward = lambda g: a.accumulate(np.full(a.shape, g / a.size, dtype=a.dtype))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, a.requires_grad, parents=(a,))
    if a.requires_grad:
        def _bw(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate(y * (g - dot))
        out._backward = _bw
    return out


def dropout(a, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Train mode zeroes cells with probability `rate` and rescales the
    survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
    a = as_tensor(a)
    if mode == "eval" or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    out = Tensor(a.data * keep, a.requires_grad, parents=(a,))
    if a.requires_grad:
        out._backward = lambda g: a.accumulate(g * keep)
    return out


class BnStats:
    """Running batch-norm statistics (eval-mode normalizers)."""

    __slots__ = ("mean", "var")

    def __init__(self, n_features: int, dtype=np.float32):
        self.mean = np.zeros(n_features, dtype=dtype)
        self.var = np.ones(n_features, dtype=dtype)

    def state_arrays(self):
        return {"mean": self.mean, "var": self.var}


def batch_norm(
    a,
    gamma: Tensor,
    beta: Tensor,
    stats: BnStats,
    mode: str,
    feature_axis: int = -1,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per feature over all other axes. Train mode uses batch
    statistics and updates the running ones; eval mode applies the running
    statistics as a fixed affine map."""
    a = as_tensor(a)
    axis = feature_axis % a.data.ndim
    reduce_axes = tuple(i for i in range(a.data.ndim) if i != axis)
    count = int(np.prod([a.shape[i] for i in reduce_axes]))
    bshape = [1] * a.data.ndim
    bshape[axis] = a.shape[axis]

    if mode == "train":
        if count < 2:
            raise BatchTooSmall(f"batch norm needs >= 2 values per feature, got {count}")
        mean = a.data.mean(axis=reduce_axes)
        var = a.data.var(axis=reduce_axes)
        stats.mean[...] = momentum * stats.mean + (1.0 - momentum) * mean
        stats.var[...] = momentum * stats.var + (1.0 - momentum) * var
    else:
        mean = stats.mean.astype(a.dtype)
        var = stats.var.astype(a.dtype)

    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape).astype(a.dtype)
    xhat = (a.data - mean.reshape(bshape)) * inv
    out_data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    req = a.requires_grad or gamma.requires_grad or beta.requires_grad
    out = Tensor(out_data, req, parents=(a, gamma, beta))
    if req:
        def _bw(g):
            if gamma.requires_grad:
                gamma.accumulate((g * xhat).sum(axis=reduce_axes))
            if beta.requires_grad:
                beta.accumulate(g.sum(axis=reduce_axes))
            if a.requires_grad:
                dxhat = g * gamma.data.reshape(bshape)
                if mode == "train":
                    s1 = dxhat.sum(axis=reduce_axes, keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=reduce_axes, keepdims=True)
                    a.accumulate(inv * (dxhat - s1 / count - xhat * s2 / count))
                else:
                    a.accumulate(dxhat * inv)
        out._backward = _bw
    return out


def _same_padding(size: int, kernel: int, stride: int):
    out = math.ceil(size / stride)
    total = max(0, (out - 1) * stride + kernel - size)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # xp: [B, C, Hp, Wp] -> [B, oh*ow, C*kh*kw]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(
        xp.shape[0], oh * ow, xp.shape[1] * kh * kw
    )
    return np.ascontiguousarray(cols)


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero "same" padding.

    x: [batch, in_ch, H, W], w: [out_ch, in_ch, kh, kw], b: [out_ch].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d of {x.shape} with kernel {w.shape}")
    batch, in_ch, h, wd = x.shape
    out_ch, _, kh, kw = w.shape
    oh, pt, pb = _same_padding(h, kh, stride)
    ow, pl, pr = _same_padding(wd, kw, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wf = w.data.reshape(out_ch, -1)
    out_data = cols @ wf.T
    if b is not None:
        out_data = out_data + b.data
    out_data = out_data.transpose(0, 2, 1).reshape(batch, out_ch, oh, ow)

    parents = (x, w) if b is None else (x, w, b)
    req = any(p.requires_grad for p in parents)
    out = Tensor(out_data, req, parents=parents)
    if req:
        hp, wp = xp.shape[2], xp.shape[3]

        def _bw(g):
            gf = g.reshape(batch, out_ch, oh * ow).transpose(0, 2, 1)  # [B, OHW, OC]
            if b is not None and b.requires_grad:
                b.accumulate(gf.sum(axis=(0, 1)))
            if w.requires_grad:
                dw = np.einsum("bok,boc->ck", cols, gf)  # [out_ch, C*kh*kw]
                w.accumulate(dw.reshape(w.shape))
            if x.requires_grad:
                dcols = gf @ wf  # [B, OHW, C*kh*kw]
                dxp = np.zeros((batch, in_ch * hp * wp), dtype=x.dtype)
                np.add.at(
                    dxp,
                    (slice(None), _col_indices(in_ch, hp, wp, kh, kw, stride, oh, ow)),
                    dcols,
                )
                dxp = dxp.reshape(batch, in_ch, hp, wp)
                x.accumulate(dxp[:, :, pt : pt + h, pl : pl + wd])

        out._backward = _bw
    return out


_COL_INDEX_CACHE: dict = {}


def _col_indices(c, hp, wp, kh, kw, stride, oh, ow) -> np.ndarray:
    """Flat indices into [C, Hp, Wp] for every im2col column position."""
    key = (c, hp, wp, kh, kw, stride, oh, ow)
    hit = _COL_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    ch, ki, kj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    patch = (ch * hp * wp + ki * wp + kj).reshape(-1)  # [C*kh*kw]
    oi, oj = np.meshgrid(np.arange(oh) * stride, np.arange(ow) * stride, indexing="ij")
    origin = (oi * wp + oj).reshape(-1)  # [oh*ow]
    idx = origin[:, None] + patch[None, :]
    _COL_INDEX_CACHE[key] = idx
    return idx


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped."""
    x = as_tensor(x)
    batch, ch, h, w = x.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"pooling {size}x{size} on {h}x{w} input")
    xc = x.data[:, :, : oh * size, : ow * size]
    windows = xc.reshape(batch, ch, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(batch, ch, oh, ow, size * size)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor(out_data, x.requires_grad, parents=(x,))
    if x.requires_grad:
        def _bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
            gwin = gflat.reshape(batch, ch, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
            dx = np.zeros_like(x.data)
            dx[:, :, : oh * size, : ow * size] = gwin.reshape(batch, ch, oh * size, ow * size)
            x.accumulate(dx)
        out._backward = _bw
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    batch, n_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeMismatch(f"labels {labels.shape} for logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(batch), labels].mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype), logits.requires_grad, parents=(logits,))
    if logits.requires_grad:
        def _bw(g):
            grad = np.exp(logp)
            grad[np.arange(batch), labels] -= 1.0
            logits.accumulate(g * grad / batch)
        out._backward = _bw
    return out
