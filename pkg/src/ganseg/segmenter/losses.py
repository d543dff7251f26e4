from __future__ import annotations

from typing import Sequence

import numpy as np

from ..numerics import functional as F
from ..numerics.tensor import Tensor


def deep_supervision_weights(levels: int, normalize: bool = True) -> np.ndarray:
    """0.5**d for d = 0 (full resolution) .. levels-1, optionally summing to 1."""
    if levels < 1:
        raise ValueError("need at least one supervision level")
    w = 0.5 ** np.arange(levels, dtype=np.float64)
    return w / w.sum() if normalize else w


def downsample_target(target: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour subsampling of an (N,H,W) class map by ``factor``."""
    if factor == 1:
        return target
    off = factor // 2
    return target[:, off::factor, off::factor]


def combined_loss(logits: Tensor, target: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """0.5 * cross-entropy + 0.5 * foreground soft Dice."""
    ce = F.softmax_cross_entropy(logits, target)
    probs = F.softmax(logits, axis=1)
    dice = F.soft_dice_loss(probs, F.one_hot(target, logits.shape[1], logits.dtype), smooth)
    return ce * 0.5 + dice * 0.5


def deep_supervision_loss(logit_pyramid: Sequence[Tensor], target: np.ndarray, normalize: bool = True,
                          smooth: float = 1e-5) -> Tensor:
    """Weighted sum of the combined loss over pyramid levels (finest first)."""
    weights = deep_supervision_weights(len(logit_pyramid), normalize)
    full_h = target.shape[-2]
    total = None
    for d, (logits, w) in enumerate(zip(logit_pyramid, weights)):
        factor = full_h // logits.shape[-2]
        if factor != 2**d or full_h % logits.shape[-2]:
            raise ValueError(f"level {d}: logits {logits.shape} do not match target {target.shape} / 2**{d}")
        term = combined_loss(logits, downsample_target(target, factor), smooth) * float(w)
        total = term if total is None else total + term
    return total
