"""Volume -> 5-channel slice preprocessing."""
from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np

from .types import LABEL_REMAP, MODALITIES, SliceDataset, SliceSample, Subject5C, Volume

logger = logging.getLogger(__name__)

DEFAULT_FRACTION = 0.15
DEFAULT_THRESHOLD = 50.0


class LabelValueError(ValueError):
    pass


def rescale_intensity(volume: Volume) -> Volume:
    """Per-volume min-max map onto [0, 255]; constant volumes become all zeros."""
    data = volume.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        out = 255.0 * (data - lo) / (hi - lo)
    else:
        out = np.zeros_like(data)
    return Volume(out.astype(np.float32), source=volume.source, dtype_tag="float32", header=volume.header)


def remap_labels(labels: Volume) -> Volume:
    data = np.asarray(labels.data)
    lut = np.zeros(256, dtype=np.uint8)
    allowed = np.zeros(256, dtype=bool)
    for raw, new in LABEL_REMAP.items():
        lut[raw] = new
        allowed[raw] = True
    as_int = np.rint(data).astype(np.int64) if data.dtype.kind == "f" else data.astype(np.int64)
    ok = (as_int >= 0) & (as_int < 256) & (as_int == data)
    ok[ok] = allowed[as_int[ok]]
    if not ok.all():
        flat = int(np.flatnonzero(~ok.ravel(order="C"))[0])
        index = np.unravel_index(flat, data.shape)
        value = data[index].item()
        raise LabelValueError(f"unexpected label value {value!r} at voxel {tuple(int(i) for i in index)}")
    return Volume(lut[as_int], source=labels.source, dtype_tag="uint8", header=labels.header)


def pad_slice(slice_: np.ndarray, size: int = 256) -> np.ndarray:
    """Centered zero padding of the last two axes up to ``size``."""
    h, w = slice_.shape[-2:]
    if h > size or w > size:
        raise ValueError(f"slice {h}x{w} larger than target {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    pad = [(0, 0)] * (slice_.ndim - 2) + [(top, size - h - top), (left, size - w - left)]
    return np.pad(slice_, pad)


def next_power_of_two(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


def keeps_slice(reference: np.ndarray, fraction: float = DEFAULT_FRACTION,
                threshold: float = DEFAULT_THRESHOLD) -> bool:
    """True iff at least ``fraction`` of the pixels exceed ``threshold``."""
    count = int(np.count_nonzero(reference > threshold))
    required = fraction * reference.size
    # tolerate the rounding in fraction * size (0.15 * 57600 is not exactly 8640)
    return count >= required - 1e-9 * reference.size


def filter_and_slice(subject: Subject5C, fraction: float = DEFAULT_FRACTION, threshold: float = DEFAULT_THRESHOLD,
                     reference_channel: int = 0, pad_size: int | None = None) -> list[SliceSample]:
    """Split an already rescaled/remapped subject into kept, padded slices (ascending z)."""
    x, y, nz = subject.dims
    size = pad_size or next_power_of_two(max(x, y))
    ref = subject.modalities[reference_channel].data
    out = []
    for z in range(nz):
        if not keeps_slice(ref[:, :, z], fraction, threshold):
            continue
        image = np.stack([m.data[:, :, z] for m in subject.modalities]).astype(np.float32)
        ann = subject.labels.data[:, :, z].astype(np.uint8)
        out.append(SliceSample(subject.subject_id, z, pad_slice(image, size), pad_slice(ann, size)))
    return out


def preprocess_subject(subject: Subject5C, fraction: float = DEFAULT_FRACTION, threshold: float = DEFAULT_THRESHOLD,
                       reference_channel: int = 0, pad_size: int | None = None) -> list[SliceSample]:
    """Rescale every modality, remap labels, then filter, slice and pad."""
    prepared = Subject5C(
        subject.subject_id,
        [rescale_intensity(v) for v in subject.modalities],
        remap_labels(subject.labels),
        subject.split,
    )
    samples = filter_and_slice(prepared, fraction, threshold, reference_channel, pad_size)
    if not samples:
        logger.warning("subject %s: no slice passed the %.0f%% > %g filter", subject.subject_id,
                       100 * fraction, threshold)
    return samples


def build_dataset(subjects: Iterable[Subject5C], fraction: float = DEFAULT_FRACTION,
                  threshold: float = DEFAULT_THRESHOLD, reference_channel: int = 0,
                  pad_size: int | None = None, seed: int | None = None, extra: dict | None = None) -> SliceDataset:
    samples: list[SliceSample] = []
    kept: dict[str, list[int]] = {}
    size = pad_size
    for subject in subjects:
        size = size or next_power_of_two(max(subject.dims[:2]))
        got = preprocess_subject(subject, fraction, threshold, reference_channel, size)
        kept[subject.subject_id] = [s.z for s in got]
        samples.extend(got)
    manifest = {
        "filter": {"fraction": fraction, "threshold": threshold, "reference_channel": MODALITIES[reference_channel]},
        "rescale": "per-volume-min-max",
        "pad_size": size,
        "seed": seed,
        "included": kept,
        "counts": {"subjects": len(kept), "samples": len(samples)},
    }
    manifest.update(extra or {})
    return SliceDataset.from_samples(samples, manifest, shape=(size or 0, size or 0))


def split_validation(subject_ids: Sequence[str], fraction: float = 0.2, seed: int = 0,
                     mode: str = "per-subject") -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation partition of sample indices."""
    if not 0 < fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    n = len(subject_ids)
    if n == 0:
        raise ValueError("cannot split an empty sample list")
    rng = np.random.default_rng(seed)
    if mode == "per-image":
        order = rng.permutation(n)
        n_val = int(round(fraction * n))
        val = np.sort(order[:n_val])
        train = np.sort(order[n_val:])
        return train, val
    if mode != "per-subject":
        raise ValueError(f"unknown split mode {mode!r}")
    unique = sorted(set(subject_ids))
    order = rng.permutation(len(unique))
    n_val = max(1, int(round(fraction * len(unique)))) if len(unique) > 1 else 0
    val_subjects = {unique[i] for i in order[:n_val]}
    is_val = np.array([s in val_subjects for s in subject_ids])
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)
