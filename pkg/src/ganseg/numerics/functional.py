"""Layers and losses used by the GAN and the U-Net, built from tensor primitives."""
from __future__ import annotations

import numpy as np

from .tensor import (
    Im2Col,
    LeakyReLU,
    SumPool,
    Tensor,
    UpsampleNearest,
    as_tensor,
    concat,
)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (F,C,kh,kw)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {f} filters")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = Im2Col.apply(x, kh=kh, kw=kw, stride=stride, padding=padding)
    out = kernel.reshape(f, c * kh * kw) @ cols
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, f, 1, 1)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def leaky_relu(x: Tensor, negative_slope: float = 1e-2) -> Tensor:
    if negative_slope < 0:
        raise ValueError("negative_slope must be >= 0")
    return LeakyReLU.apply(x, slope=negative_slope)


def instance_norm(x: Tensor, gain: Tensor | None = None, shift: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mean = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    y = centered * (var + eps) ** -0.5
    c = x.shape[1]
    if gain is not None:
        y = y * gain.reshape(1, c, 1, 1)
    if shift is not None:
        y = y + shift.reshape(1, c, 1, 1)
    return y


def pixel_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each pixel's channel vector to unit RMS: x / sqrt(mean_c(x^2) + eps)."""
    return x * ((x * x).mean(axis=1, keepdims=True) + eps) ** -0.5


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    return UpsampleNearest.apply(x, factor=int(factor))


def avg_pool2(x: Tensor) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    return SumPool.apply(x, factor=2) * 0.25


def downsample(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    return SumPool.apply(x, factor=factor) * (1.0 / (factor * factor))


def minibatch_stddev(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Append the batch-averaged feature standard deviation as one extra channel."""
    n, _, h, w = x.shape
    centered = x - x.mean(axis=0, keepdims=True)
    std = ((centered * centered).mean(axis=0) + eps).sqrt()
    feature = std.mean().reshape(1, 1, 1, 1).broadcast_to((n, 1, h, w))
    return concat([x, feature], axis=1)


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    shift = Tensor(logits.data.max(axis=axis, keepdims=True))
    z = logits - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    shift = Tensor(logits.data.max(axis=axis, keepdims=True))
    e = (logits - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N,H,W) integer map -> (N,K,H,W) indicator array."""
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        bad = target[(target < 0) | (target >= num_classes)].flat[0]
        raise ValueError(f"class index {bad} outside [0, {num_classes})")
    out = (target[:, None, ...] == np.arange(num_classes).reshape(1, -1, *([1] * (target.ndim - 1))))
    return out.astype(dtype)


def softmax_cross_entropy(logits: Tensor, target_class: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target]."""
    k = logits.shape[1]
    target = np.asarray(target_class)
    expected = (logits.shape[0],) + logits.shape[2:]
    if target.shape != expected:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    onehot = one_hot(target, k, dtype=logits.dtype)
    logp = log_softmax(logits, axis=1)
    n_pix = target.size
    return -(logp * Tensor(onehot)).sum() * (1.0 / n_pix)


def soft_dice_loss(probabilities: Tensor, target_one_hot, smooth: float = 1e-5, foreground_only: bool = True) -> Tensor:
    """1 - mean over classes of (2 sum(p t) + smooth) / (sum p + sum t + smooth).

    Sums are pooled over batch and space per class. Class 0 (background) is
    skipped when ``foreground_only``.
    """
    t = as_tensor(target_one_hot, dtype=probabilities.dtype)
    if t.shape != probabilities.shape:
        raise ValueError(f"target shape {t.shape} does not match probabilities {probabilities.shape}")
    if foreground_only and probabilities.shape[1] > 1:
        p = probabilities[:, 1:]
        t = t[:, 1:]
    else:
        p = probabilities
    axes = (0,) + tuple(range(2, p.ndim))
    intersect = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes)
    dice = (intersect * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice.mean()
