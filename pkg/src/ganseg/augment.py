"""Training-time augmentation of 5-channel slices.

Order: rotation / independent width-height scaling (image and target),
Gaussian noise, Gaussian blur, simulated low resolution, gamma, and finally
per-channel z-scoring. Intensity steps operate on [0, 1] images.
"""
from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    p_rotate: float = Field(0.75, ge=0, le=1)
    rotate_range: tuple[float, float] = (-30.0, 30.0)  # degrees
    p_scale: float = Field(0.75, ge=0, le=1)
    scale_range: tuple[float, float] = (0.9, 1.1)
    p_noise: float = Field(0.5, ge=0, le=1)
    noise_std_range: tuple[float, float] = (0.0, 0.05)
    p_blur: float = Field(0.2, ge=0, le=1)
    blur_std_range: tuple[float, float] = (0.5, 1.0)
    p_lowres: float = Field(0.25, ge=0, le=1)
    lowres_zoom_range: tuple[float, float] = (0.75, 1.0)
    p_gamma: float = Field(0.3, ge=0, le=1)
    gamma_range: tuple[float, float] = (0.8, 1.2)

    @model_validator(mode="after")
    def _ranges_ordered(self):
        for name in ("rotate_range", "scale_range", "noise_std_range", "blur_std_range",
                     "lowres_zoom_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        return self

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enabled=False)


def _bilinear_sample(channel: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``channel`` at fractional coordinates; outside the grid reads 0."""
    h, w = channel.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(rows.shape, dtype=np.float64)
            vals[inside] = channel[rr[inside], cc[inside]]
            out += wr * wc * vals
    return out


def _source_coords(shape, angle: float, sx: float, sy: float):
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rr - cy, cc - cx
    cos, sin = math.cos(angle), math.sin(angle)
    # inverse of (scale then rotate) applied about the centre
    ux = cos * dx + sin * dy
    uy = -sin * dx + cos * dy
    return uy / sy + cy, ux / sx + cx


def rotate_scale(image: np.ndarray, target: np.ndarray, angle: float, sx: float = 1.0, sy: float = 1.0):
    """Rotate by ``angle`` radians and scale width by ``sx``, height by ``sy``.

    Bilinear for image channels (C,H,W), nearest neighbour for the target (H,W).
    """
    if sx <= 0 or sy <= 0:
        raise ValueError("scale factors must be positive")
    shape = target.shape
    src_r, src_c = _source_coords(shape, angle, sx, sy)
    out_img = np.stack([_bilinear_sample(ch, src_r, src_c) for ch in image]).astype(image.dtype)
    nr = np.floor(src_r + 0.5).astype(np.int64)
    nc = np.floor(src_c + 0.5).astype(np.int64)
    inside = (nr >= 0) & (nr < shape[0]) & (nc >= 0) & (nc < shape[1])
    out_t = np.zeros_like(target)
    out_t[inside] = target[nr[inside], nc[inside]]
    return out_img, out_t


def add_gaussian_noise(x: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    return x + rng.normal(0.0, std, x.shape).astype(x.dtype)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Separable normalised Gaussian, radius ceil(3 sigma), mirrored borders."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(channel.astype(np.float64), k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return out.astype(channel.dtype)


def resize_bilinear(channel: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    h, w = channel.shape
    rows = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    cols = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    x = channel.astype(np.float64)
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bot = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    return (top * (1 - fr) + bot * fr).astype(channel.dtype)


def simulate_low_res(channel: np.ndarray, zoom: float) -> np.ndarray:
    if not 0 < zoom <= 1:
        raise ValueError("zoom must lie in (0, 1]")
    h, w = channel.shape
    small = resize_bilinear(channel, max(1, round(zoom * h)), max(1, round(zoom * w)))
    return resize_bilinear(small, h, w)


def adjust_gamma(channel: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.clip(channel, 0.0, 1.0) ** gamma


def zscore(channel: np.ndarray) -> np.ndarray:
    mean = channel.mean()
    std = channel.std()
    return ((channel - mean) / max(std, 1e-8)).astype(channel.dtype)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """The evaluation-time path: [0, 255] -> [0, 1] -> per-channel z-score."""
    x = image.astype(np.float32) / 255.0
    return np.stack([zscore(ch) for ch in x])


def augment(image: np.ndarray, target: np.ndarray, config: AugmentConfig, rng: np.random.Generator):
    """Augment one sample; ``image`` is (4,H,W) in [0, 255], ``target`` (H,W) labels.

    Returns the z-scored float32 image and the transformed target.
    """
    x = image.astype(np.float32) / 255.0
    t = target
    if config.enabled:
        angle = 0.0
        sx = sy = 1.0
        do_rot = rng.uniform() < config.p_rotate
        if do_rot:
            angle = math.radians(rng.uniform(*config.rotate_range))
        do_scale = rng.uniform() < config.p_scale
        if do_scale:
            sx = rng.uniform(*config.scale_range)
            sy = rng.uniform(*config.scale_range)
        if do_rot or do_scale:
            x, t = rotate_scale(x, t, angle, sx, sy)
        if rng.uniform() < config.p_noise:
            std = rng.uniform(*config.noise_std_range)
            x = add_gaussian_noise(x, std, rng)
        if rng.uniform() < config.p_blur:
            x = np.stack([gaussian_blur(ch, rng.uniform(*config.blur_std_range)) for ch in x])
        if rng.uniform() < config.p_lowres:
            zoom = rng.uniform(*config.lowres_zoom_range)
            x = np.stack([simulate_low_res(ch, zoom) for ch in x])
        if rng.uniform() < config.p_gamma:
            gamma = rng.uniform(*config.gamma_range)
            x = np.stack([adjust_gamma(ch, gamma) for ch in x])
    x = np.stack([zscore(ch) for ch in x]).astype(np.float32)
    return x, t
