"""Image and normalization operators built on :mod:`recon3dpx.autodiff.tensor`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``weight[F,C,k,k]``.

    Computed as a sum over the k*k kernel offsets, each a channel matmul on
    a strided view of the padded input.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    f, wc, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if wc != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({f},)")
    span_h = h + 2 * padding - k
    span_w = w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(
            f"conv2d output extent not integral for H={h}, W={w}, k={k}, s={stride}, p={padding}"
        )
    oh, ow = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data

    def window(arr, i, j):
        return arr[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]

    out = np.zeros((b, f, oh, ow), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(k):
        for j in range(k):
            # (F,C) x (B,C,oh,ow) -> (F,B,oh,ow)
            out += np.tensordot(wd[:, :, i, j], window(xp, i, j), axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                gw[:, :, i, j] = np.tensordot(g, window(xp, i, j), axes=([0, 2, 3], [0, 2, 3]))
                window(gxp, i, j)[...] += np.tensordot(wd[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "conv2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance; mutated in train mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    train: bool = True,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalization of ``x[B,C,H,W]``.

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into ``stats``; eval mode reads ``stats`` only.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm affine params must be ({c},), got {gamma.shape}, {beta.shape}")
    count = b * h * w
    axes = (0, 2, 3)
    if train:
        if count < 2:
            raise ValueError("batch_norm in train mode needs at least 2 values per channel (B*H*W >= 2)")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mean
        stats.var[...] = (1 - momentum) * stats.var + momentum * var * count / (count - 1)
    else:
        mean, var = stats.mean, stats.var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - np.asarray(mean, dtype=x.dtype).reshape(1, c, 1, 1)) * inv_std
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if train:
            gx = (
                inv_std
                / count
                * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm params must be ({c},), got {gamma.shape}, {beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gxhat = g * gamma.data
        gx = inv_std / c * (
            c * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


def _check_pool_dims(x: Tensor, k: int, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects [B,C,H,W], got {x.shape}")
    _, _, h, w = x.shape
    for axis, n in (("H", h), ("W", w)):
        if n % k:
            raise DimensionError(f"{what}: {axis}={n} is not divisible by {k}")


def max_pool2d(x: Tensor, k: int = 2, s: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first index."""
    if k != s:
        raise ValueError("only non-overlapping pooling (k == s) is supported")
    _check_pool_dims(x, k, "max_pool2d")
    b, c, h, w = x.shape
    oh, ow = h // k, w // k
    windows = x.data.reshape(b, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, k * k)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return make_result(out, (x,), bw, "max_pool2d")


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    if x.ndim != 4:
        raise DimensionError(f"upsample2d expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), bw, "upsample2d")


def avg_pool2d_array(arr: np.ndarray, k: int = 2) -> np.ndarray:
    """Plain (untracked) k x k average pooling over the last two axes."""
    *lead, h, w = arr.shape
    if h % k or w % k:
        raise DimensionError(f"avg pool: ({h},{w}) not divisible by {k}")
    return arr.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))
