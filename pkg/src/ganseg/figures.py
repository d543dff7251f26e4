"""Static PNG panels: 5-channel sample grids and prediction overlays."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

# overlay colours: ET red, ED blue, NCR/NET green
OVERLAY_COLORS = {204: (255, 0, 0), 102: (0, 0, 255), 51: (0, 255, 0)}
ANNOTATION_COLORS = {0: (0, 0, 0), **OVERLAY_COLORS}
_GAP = 2


def _gray(channel: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(channel, dtype=np.float64), 0, 255).astype(np.uint8)
    return np.repeat(c[..., None], 3, axis=-1)


def colorize_annotation(annotation: np.ndarray) -> np.ndarray:
    out = np.zeros(annotation.shape + (3,), dtype=np.uint8)
    for label, rgb in ANNOTATION_COLORS.items():
        out[annotation == label] = rgb
    return out


def overlay(background: np.ndarray, labels: np.ndarray, opacity: float = 0.5) -> np.ndarray:
    base = _gray(background).astype(np.float64)
    for label, rgb in OVERLAY_COLORS.items():
        mask = labels == label
        base[mask] = (1 - opacity) * base[mask] + opacity * np.asarray(rgb, dtype=np.float64)
    return np.round(base).astype(np.uint8)


def _grid(rows: Sequence[Sequence[np.ndarray]], scale: int) -> np.ndarray:
    h, w = rows[0][0].shape[:2]
    n_cols = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (h * scale + _GAP) - _GAP, n_cols * (w * scale + _GAP) - _GAP, 3), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            big = tile.repeat(scale, axis=0).repeat(scale, axis=1)
            y, x = i * (h * scale + _GAP), j * (w * scale + _GAP)
            canvas[y : y + h * scale, x : x + w * scale] = big
    return canvas


def _scale_for(size: int) -> int:
    return max(1, 128 // size)


def save_sample_grid(images: np.ndarray, annotations: np.ndarray, path, n: int | None = None) -> Path:
    """One row per sample: the four modalities followed by the coloured annotation."""
    n = len(images) if n is None else min(n, len(images))
    if n == 0:
        raise ValueError("no samples to render")
    rows = [[_gray(images[i, c]) for c in range(images.shape[1])] + [colorize_annotation(annotations[i])]
            for i in range(n)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_grid(rows, _scale_for(images.shape[-1]))).save(path)
    return path


def save_prediction_panel(background: np.ndarray, truth: np.ndarray, predictions: Mapping[str, np.ndarray],
                          path, titles_path=None) -> Path:
    """Ground-truth overlay followed by one overlay per configuration, left to right."""
    tiles = [overlay(background, truth)] + [overlay(background, p) for p in predictions.values()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_grid([tiles], _scale_for(background.shape[-1]))).save(path)
    if titles_path is not None:
        Path(titles_path).write_text("\n".join(["annotation", *predictions]) + "\n")
    return path
