"""U-Net with instance normalisation, leaky ReLU and deep-supervision heads."""
from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..numerics import functional as F
from ..numerics.layers import Conv2d, InstanceNorm2d, Module
from ..numerics.tensor import Tensor, concat


class UNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    in_channels: int = 4
    num_classes: int = 4
    depth: int = Field(4, ge=2)
    base_width: int = Field(16, ge=1)
    max_width: int = Field(256, ge=1)
    leaky_slope: float = 1e-2
    instance_norm: bool = True
    deep_supervision_levels: int | None = Field(None, ge=1)  # default min(5, depth)

    @model_validator(mode="after")
    def _levels_fit(self):
        if self.levels > self.depth:
            raise ValueError(f"{self.levels} supervision levels exceed depth {self.depth}")
        return self

    @property
    def levels(self) -> int:
        return self.deep_supervision_levels or min(5, self.depth)

    def width(self, level: int) -> int:
        return min(self.max_width, self.base_width * 2**level)


class ConvBlock(Module):
    """conv3x3 -> instance norm -> leaky ReLU."""

    def __init__(self, c_in: int, c_out: int, rng, norm: bool, slope: float):
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.norm = InstanceNorm2d(c_out) if norm else None
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return F.leaky_relu(x, self.slope)


class _Stage(Module):
    def __init__(self, c_in: int, c_out: int, rng, cfg: UNetConfig):
        self.a = ConvBlock(c_in, c_out, rng, cfg.instance_norm, cfg.leaky_slope)
        self.b = ConvBlock(c_out, c_out, rng, cfg.instance_norm, cfg.leaky_slope)

    def forward(self, x: Tensor) -> Tensor:
        return self.b(self.a(x))


class UNet(Module):
    """``forward`` returns logits at full resolution first, then coarser
    auxiliary outputs: one per deep-supervision level."""

    def __init__(self, config: UNetConfig, rng: np.random.Generator):
        self.config = config
        cfg = config
        self.encoder = []
        c_prev = cfg.in_channels
        for level in range(cfg.depth):
            self.encoder.append(_Stage(c_prev, cfg.width(level), rng, cfg))
            c_prev = cfg.width(level)
        self.decoder = []
        for level in reversed(range(cfg.depth - 1)):
            self.decoder.append(_Stage(cfg.width(level + 1) + cfg.width(level), cfg.width(level), rng, cfg))
        # heads[d] produces logits at 1 / 2**d of the input resolution
        self.heads = [Conv2d(cfg.width(d), cfg.num_classes, 1, rng, gain=1.0) for d in range(cfg.levels)]

    def forward(self, x: Tensor) -> list[Tensor]:
        cfg = self.config
        h, w = x.shape[2:]
        div = 2 ** (cfg.depth - 1)
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} is not divisible by 2**(depth-1) = {div}")
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        skips = []
        for level, stage in enumerate(self.encoder):
            if level > 0:
                x = F.avg_pool2(x)
            x = stage(x)
            skips.append(x)
        features = {cfg.depth - 1: x}
        for i, stage in enumerate(self.decoder):
            level = cfg.depth - 2 - i
            x = F.upsample_nearest(x, 2)
            x = stage(concat([x, skips[level]], axis=1))
            features[level] = x
        return [self.heads[d](features[d]) for d in range(cfg.levels)]


def build_unet(config: UNetConfig, rng: np.random.Generator | int = 0) -> UNet:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return UNet(config, rng)
