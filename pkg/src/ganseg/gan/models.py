"""Progressive-growing generator and critic for 5-channel slices.

Simplified from the original progressive GAN: pixel normalisation,
nearest-neighbour growth with fade-in and a minibatch-stddev feature are
kept; equalised learning rate and generator weight averaging are not.
"""
from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..numerics import functional as F
from ..numerics.layers import Conv2d, Linear, Module
from ..numerics.tensor import Tensor

N_CHANNELS = 5


class GanConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    latent_dim: int = Field(64, ge=1)
    base_channels: int = Field(64, ge=1)
    min_channels: int = Field(16, ge=1)
    target_resolution: int = 32
    images_per_stage: int = Field(20_000, ge=1)
    fade_fraction: float = Field(0.5, ge=0, le=1)
    batch_size: int = Field(16, ge=2)
    lr: float = Field(1e-3, ge=0)
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    gp_weight: float = 10.0
    drift: float = 1e-3
    leaky_slope: float = 0.2
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0)  # images; 0 disables periodic checkpoints

    @model_validator(mode="after")
    def _valid_resolution(self):
        r = self.target_resolution
        if r < 8 or r & (r - 1):
            raise ValueError(f"target_resolution must be a power of two >= 8, got {r}")
        return self

    @property
    def resolutions(self) -> list[int]:
        return [4 * 2**i for i in range(int(math.log2(self.target_resolution)) - 1)]

    @property
    def total_images(self) -> int:
        return self.images_per_stage * len(self.resolutions)

    def channels(self, res: int) -> int:
        shift = max(0, int(math.log2(res)) - 3)
        return max(self.min_channels, self.base_channels >> shift)


def progressive_schedule(images_seen: int, config: GanConfig) -> tuple[int, float]:
    """(resolution, fade alpha) after ``images_seen`` training images."""
    if images_seen < 0:
        raise ValueError("images_seen must be >= 0")
    stage = images_seen // config.images_per_stage
    resolutions = config.resolutions
    if stage >= len(resolutions):
        return config.target_resolution, 1.0
    if stage == 0:
        return resolutions[0], 1.0
    fade_len = config.fade_fraction * config.images_per_stage
    into = images_seen - stage * config.images_per_stage
    alpha = 1.0 if fade_len <= 0 else min(1.0, into / fade_len)
    return resolutions[stage], alpha


class _GBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)

    def forward(self, x: Tensor, slope: float) -> Tensor:
        x = F.pixel_norm(F.leaky_relu(self.conv1(x), slope))
        return F.pixel_norm(F.leaky_relu(self.conv2(x), slope))


class Generator(Module):
    def __init__(self, config: GanConfig, rng: np.random.Generator):
        self.config = config
        c4 = config.channels(4)
        self.fc = Linear(config.latent_dim, c4 * 16, rng, gain=math.sqrt(2.0) / 4)
        self.conv4 = Conv2d(c4, c4, 3, rng)
        self.blocks = [_GBlock(config.channels(r // 2), config.channels(r), rng) for r in config.resolutions[1:]]
        self.to_rgb = [Conv2d(config.channels(r), N_CHANNELS, 1, rng, gain=1.0) for r in config.resolutions]

    def forward(self, z: Tensor, resolution: int | None = None, alpha: float = 1.0) -> Tensor:
        cfg = self.config
        resolution = resolution or cfg.target_resolution
        if resolution not in cfg.resolutions:
            raise ValueError(f"resolution {resolution} not in {cfg.resolutions}")
        slope = cfg.leaky_slope
        x = self.fc(F.pixel_norm(z))
        x = x.reshape(z.shape[0], cfg.channels(4), 4, 4)
        x = F.pixel_norm(F.leaky_relu(x, slope))
        x = F.pixel_norm(F.leaky_relu(self.conv4(x), slope))
        stage = cfg.resolutions.index(resolution)
        prev = x
        for block in self.blocks[:stage]:
            prev = x
            x = block(F.upsample_nearest(x, 2), slope)
        out = self.to_rgb[stage](x)
        if stage > 0 and alpha < 1.0:
            skip = F.upsample_nearest(self.to_rgb[stage - 1](prev), 2)
            out = out * alpha + skip * (1.0 - alpha)
        return out.tanh()


class _DBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng):
        self.conv1 = Conv2d(c_in, c_in, 3, rng)
        self.conv2 = Conv2d(c_in, c_out, 3, rng)

    def forward(self, x: Tensor, slope: float) -> Tensor:
        x = F.leaky_relu(self.conv1(x), slope)
        x = F.leaky_relu(self.conv2(x), slope)
        return F.avg_pool2(x)


class Discriminator(Module):
    def __init__(self, config: GanConfig, rng: np.random.Generator):
        self.config = config
        c4 = config.channels(4)
        self.from_rgb = [Conv2d(N_CHANNELS, config.channels(r), 1, rng) for r in config.resolutions]
        # blocks[i] maps resolutions[i + 1] down to resolutions[i]
        self.blocks = [_DBlock(config.channels(r), config.channels(r // 2), rng) for r in config.resolutions[1:]]
        self.conv4 = Conv2d(c4 + 1, c4, 3, rng)
        self.fc1 = Linear(c4 * 16, c4, rng)
        self.fc2 = Linear(c4, 1, rng, gain=1.0)

    def forward(self, x: Tensor, resolution: int | None = None, alpha: float = 1.0) -> Tensor:
        cfg = self.config
        resolution = resolution or x.shape[-1]
        stage = cfg.resolutions.index(resolution)
        slope = cfg.leaky_slope
        h = F.leaky_relu(self.from_rgb[stage](x), slope)
        if stage > 0:
            h = self.blocks[stage - 1](h, slope)
            if alpha < 1.0:
                skip = F.leaky_relu(self.from_rgb[stage - 1](F.avg_pool2(x)), slope)
                h = h * alpha + skip * (1.0 - alpha)
            for block in reversed(self.blocks[: stage - 1]):
                h = block(h, slope)
        h = F.minibatch_stddev(h)
        h = F.leaky_relu(self.conv4(h), slope)
        h = h.reshape(h.shape[0], -1)
        h = F.leaky_relu(self.fc1(h), slope)
        return self.fc2(h).reshape(-1)


def build_generator(config: GanConfig, rng: np.random.Generator | None = None) -> Generator:
    return Generator(config, rng if rng is not None else np.random.default_rng(config.seed))


def build_discriminator(config: GanConfig, rng: np.random.Generator | None = None) -> Discriminator:
    return Discriminator(config, rng if rng is not None else np.random.default_rng(config.seed + 1))
