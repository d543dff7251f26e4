"""Procedural brain-tumour phantoms standing in for BraTS subjects.

Each subject is an ellipsoidal head with a smooth per-modality intensity
field and a tumour of three nested regions: necrotic core (raw label 1),
enhancing rim (4) and surrounding edema (2). Region contrasts differ per
modality the way they do in real MR (rim bright after contrast, edema
bright in FLAIR). Labels use the raw BraTS coding; ``preprocess`` remaps
them to the 8-bit palette.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..seeding import derive_seed
from .types import Subject5C, Volume

# rows: t1, t1ce, t2, flair; columns: NCR/NET, ET, ED
CONTRAST = np.array(
    [
        [0.45, 0.75, 0.80],
        [0.50, 1.90, 0.85],
        [1.70, 1.30, 1.55],
        [0.90, 1.35, 1.80],
    ]
)
BASE_INTENSITY = np.array([500.0, 450.0, 350.0, 300.0])


def _smooth_field(rng: np.random.Generator, coords, n_waves: int = 3, scale: float = 1.0) -> np.ndarray:
    field = np.zeros(coords[0].shape)
    for _ in range(n_waves):
        k = rng.normal(0.0, 2.0 * np.pi / scale, 3)
        field += np.cos(k[0] * coords[0] + k[1] * coords[1] + k[2] * coords[2] + rng.uniform(0, 2 * np.pi))
    return field / n_waves


def generate_subject(seed: int, subject_id: str, dims=(64, 64, 32), split: str = "train") -> Subject5C:
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    x, y, z = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64),
                          np.arange(nz, dtype=np.float64), indexing="ij")
    center = np.array([nx, ny, nz], dtype=np.float64) / 2.0 - 0.5
    center[:2] += rng.uniform(-0.02, 0.02, 2) * np.array([nx, ny])
    semi = np.array([nx * rng.uniform(0.38, 0.44), ny * rng.uniform(0.40, 0.46), nz * rng.uniform(0.44, 0.5)])
    head_r = ((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2 + ((z - center[2]) / semi[2]) ** 2
    head = head_r <= 1.0

    # tumour centre on a voxel so the core always contains at least that voxel
    offset = rng.uniform(-1, 1, 3) * np.array([0.4, 0.4, 0.2]) * semi
    t_center = np.rint(center + offset)
    r_ed = min(nx, ny) * rng.uniform(0.18, 0.25)
    r_et = r_ed * rng.uniform(0.62, 0.75)
    r_ncr = r_et * rng.uniform(0.5, 0.62)
    stretch = rng.uniform(0.85, 1.15, 3)
    coords = ((x - t_center[0]) / stretch[0], (y - t_center[1]) / stretch[1], (z - t_center[2]) / stretch[2])
    dist = np.sqrt(coords[0] ** 2 + coords[1] ** 2 + coords[2] ** 2)
    dist *= 1.0 + 0.12 * _smooth_field(rng, coords, scale=r_ed * 1.5)
    dist[tuple(t_center.astype(int))] = 0.0

    labels = np.zeros(dims, dtype=np.uint8)
    labels[(dist < r_ed) & head] = 2
    labels[(dist < r_et) & head] = 4
    labels[(dist < r_ncr) & head] = 1

    region_masks = [labels == 1, labels == 4, labels == 2]
    norm_coords = ((x - center[0]) / nx, (y - center[1]) / ny, (z - center[2]) / nz)
    site_gain = rng.uniform(0.8, 1.2, 4)
    modalities = []
    for m in range(4):
        mult = np.ones(dims)
        for r, mask in enumerate(region_masks):
            mult[mask] = CONTRAST[m, r] * rng.uniform(0.92, 1.08)
        mult = ndimage.gaussian_filter(mult, 0.6)
        bias = 1.0 + 0.12 * _smooth_field(rng, norm_coords, scale=1.5)
        texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, dims), 1.0)
        value = BASE_INTENSITY[m] * site_gain[m] * bias * mult * (1.0 + 0.08 * texture)
        value += rng.normal(0.0, 0.03 * BASE_INTENSITY[m], dims)
        value = np.where(head, np.maximum(value, 0.0), 0.0)
        modalities.append(Volume(value.astype(np.float32), source=f"{subject_id}/{m}"))
    return Subject5C(subject_id, modalities, Volume(labels, source=f"{subject_id}/seg"), split)


def generate_phantom(seed: int, n_subjects: int, dims=(64, 64, 32), start_index: int = 0,
                     split: str = "train") -> list[Subject5C]:
    """``n_subjects`` phantoms; subject i uses the stream derived from (seed, i)."""
    if n_subjects < 0:
        raise ValueError("n_subjects must be >= 0")
    if any(d < 16 or d % 2 for d in dims):
        raise ValueError(f"phantom dims must be even and >= 16, got {dims}")
    return [
        generate_subject(derive_seed(seed, i), f"P{i:04d}", tuple(dims), split)
        for i in range(start_index, start_index + n_subjects)
    ]
