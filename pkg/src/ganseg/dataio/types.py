from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

MODALITIES = ("t1", "t1ce", "t2", "flair")

# BraTS raw coding: 1 = NCR/NET, 2 = ED, 4 = ET
RAW_LABELS = (0, 1, 2, 4)
LABEL_REMAP = {0: 0, 1: 51, 2: 102, 4: 204}
PALETTE = (0, 51, 102, 204)
CLASS_OF_LABEL = {label: i for i, label in enumerate(PALETTE)}
LABEL_NAMES = {51: "NCR/NET", 102: "ED", 204: "ET"}


@dataclass
class Volume:
    data: np.ndarray
    source: str = ""
    dtype_tag: str = ""
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.data.shape}")
        if not self.dtype_tag:
            self.dtype_tag = str(self.data.dtype)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class Subject5C:
    subject_id: str
    modalities: list[Volume]
    labels: Volume
    split: str = "train"

    def __post_init__(self):
        if len(self.modalities) != 4:
            raise ValueError(f"{self.subject_id}: expected 4 modalities, got {len(self.modalities)}")
        dims = {v.dims for v in self.modalities} | {self.labels.dims}
        if len(dims) != 1:
            raise ValueError(f"{self.subject_id}: modality/label dims differ: {sorted(dims)}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.dims


@dataclass
class SliceSample:
    """One 5-channel slice: four image channels in [0, 255] plus the annotation."""

    subject_id: str
    z: int
    image: np.ndarray  # (4, H, W) float32
    annotation: np.ndarray  # (H, W) uint8 in PALETTE
    member: int = -1  # generating GAN index, -1 for real data

    @property
    def channels(self) -> np.ndarray:
        return np.concatenate([self.image, self.annotation[None].astype(np.float32)], axis=0)


class SliceDataset:
    """Column-oriented collection of slices with a manifest dictionary."""

    def __init__(self, images: np.ndarray, annotations: np.ndarray, subject_ids: Sequence[str],
                 z: Sequence[int], member: Sequence[int] | None = None, manifest: dict | None = None):
        n = len(subject_ids)
        images = np.asarray(images, dtype=np.float32)
        annotations = np.asarray(annotations, dtype=np.uint8)
        if images.ndim != 4 or images.shape[0] != n or images.shape[1] != 4:
            raise ValueError(f"images must be (N,4,H,W) with N={n}, got {images.shape}")
        if annotations.shape != (n,) + images.shape[2:]:
            raise ValueError(f"annotations shape {annotations.shape} does not match images {images.shape}")
        self.images = images
        self.annotations = annotations
        self.subject_ids = list(subject_ids)
        self.z = np.asarray(z, dtype=np.int32).reshape(n)
        self.member = np.full(n, -1, np.int32) if member is None else np.asarray(member, np.int32).reshape(n)
        self.manifest = dict(manifest or {})

    @classmethod
    def from_samples(cls, samples: Sequence[SliceSample], manifest: dict | None = None,
                     shape: tuple[int, int] | None = None) -> "SliceDataset":
        if samples:
            images = np.stack([s.image for s in samples])
            annotations = np.stack([s.annotation for s in samples])
        else:
            h, w = shape or (0, 0)
            images = np.zeros((0, 4, h, w), np.float32)
            annotations = np.zeros((0, h, w), np.uint8)
        return cls(images, annotations, [s.subject_id for s in samples], [s.z for s in samples],
                   [s.member for s in samples], manifest)

    @classmethod
    def concatenate(cls, parts: Sequence["SliceDataset"], manifest: dict | None = None) -> "SliceDataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.annotations for p in parts]),
            [s for p in parts for s in p.subject_ids],
            np.concatenate([p.z for p in parts]),
            np.concatenate([p.member for p in parts]),
            manifest,
        )

    def __len__(self) -> int:
        return len(self.subject_ids)

    def __getitem__(self, i: int) -> SliceSample:
        return SliceSample(self.subject_ids[i], int(self.z[i]), self.images[i], self.annotations[i], int(self.member[i]))

    def __iter__(self) -> Iterator[SliceSample]:
        return (self[i] for i in range(len(self)))

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    def subset(self, indices) -> "SliceDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SliceDataset(self.images[idx], self.annotations[idx], [self.subject_ids[i] for i in idx],
                            self.z[idx], self.member[idx], self.manifest)

    def five_channel(self) -> np.ndarray:
        """(N, 5, H, W) float32 stack with the annotation as the last channel."""
        return np.concatenate([self.images, self.annotations[:, None].astype(np.float32)], axis=1)

    def equals(self, other: "SliceDataset") -> bool:
        return (
            np.array_equal(self.images, other.images)
            and np.array_equal(self.annotations, other.annotations)
            and self.subject_ids == other.subject_ids
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.member, other.member)
            and self.manifest == other.manifest
        )
