"""Parameter containers for the models."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class: parameters are Tensors with ``requires_grad`` held as
    attributes, directly or inside sub-modules / lists of sub-modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, rng: np.random.Generator,
                 padding: int | None = None, gain: float = np.sqrt(2.0), dtype=np.float32):
        fan_in = in_ch * kernel_size * kernel_size
        std = gain / np.sqrt(fan_in)
        self.weight = _param(rng.normal(0.0, std, (out_ch, in_ch, kernel_size, kernel_size)), dtype)
        self.bias = _param(np.zeros(out_ch), dtype)
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 gain: float = np.sqrt(2.0), dtype=np.float32):
        std = gain / np.sqrt(in_features)
        self.weight = _param(rng.normal(0.0, std, (in_features, out_features)), dtype)
        self.bias = _param(np.zeros(out_features), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class InstanceNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.gain = _param(np.ones(channels), dtype)
        self.shift = _param(np.zeros(channels), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.instance_norm(x, self.gain, self.shift, self.eps)
