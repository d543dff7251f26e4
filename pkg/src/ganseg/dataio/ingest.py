"""Load per-subject NIfTI directories.

Layout: ``<root>/<subject>/<subject>_{t1,t1ce,t2,flair,seg}.nii`` (``.nii.gz``
is also accepted).
"""
from __future__ import annotations

import gzip
from pathlib import Path

from .nifti import parse_nifti
from .types import MODALITIES, Subject5C, Volume


class MissingModalityError(FileNotFoundError):
    def __init__(self, subject_id: str, modality: str, directory):
        super().__init__(f"subject {subject_id}: no {modality} volume in {directory}")
        self.subject_id = subject_id
        self.modality = modality


def _read_volume(directory: Path, subject_id: str, key: str) -> Volume:
    for suffix in (".nii", ".nii.gz"):
        path = directory / f"{subject_id}_{key}{suffix}"
        if path.exists():
            blob = path.read_bytes()
            if suffix == ".nii.gz":
                blob = gzip.decompress(blob)
            return parse_nifti(blob, source=str(path))
    raise MissingModalityError(subject_id, key, directory)


def read_subject_dir(directory, split: str = "train") -> Subject5C:
    d = Path(directory)
    subject_id = d.name
    volumes = [_read_volume(d, subject_id, m) for m in MODALITIES]
    return Subject5C(subject_id, volumes, _read_volume(d, subject_id, "seg"), split)


def iter_subject_dirs(root, split: str = "train"):
    """Subjects under ``root`` in sorted directory-name order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"input directory {root} does not exist")
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        yield read_subject_dir(d, split)
