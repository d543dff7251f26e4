"""Segmenter training: mixed sampling, augmentation, deep supervision,
Nesterov SGD with polynomial decay, and best-validation model selection."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..augment import AugmentConfig, augment, normalize_image
from ..dataio.types import PALETTE, SliceDataset
from ..numerics.optim import SGDNesterov, poly_lr
from ..numerics.serialize import load_parameters, save_parameters
from ..numerics.tensor import NonFiniteError, Tensor, no_grad
from .losses import deep_supervision_loss
from .unet import UNet, UNetConfig, build_unet

logger = logging.getLogger(__name__)

_LABEL_TO_CLASS = np.zeros(256, dtype=np.int64)
for _c, _label in enumerate(PALETTE):
    _LABEL_TO_CLASS[_label] = _c
_CLASS_TO_LABEL = np.asarray(PALETTE, dtype=np.uint8)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr0: float = Field(5e-2, ge=0)
    momentum: float = Field(0.99, ge=0, lt=1)
    weight_decay: float = Field(3e-5, ge=0)
    poly_exponent: float = 0.9
    sample_budget: int = Field(200_000, ge=0)
    wall_clock_seconds: float | None = None
    batch_size: int = Field(8, ge=1)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    val_split_mode: str = "per-subject"
    val_interval: int = Field(50, ge=1)
    grad_clip: float | None = 12.0
    normalize_ds_weights: bool = True
    dice_smooth: float = 1e-5
    mix_real_synthetic: bool = True
    repeats: int = Field(10, ge=1)
    seed: int = 0

    @property
    def total_steps(self) -> int:
        return math.ceil(self.sample_budget / self.batch_size)


def labels_to_classes(annotation: np.ndarray) -> np.ndarray:
    return _LABEL_TO_CLASS[annotation]


def classes_to_labels(classes: np.ndarray) -> np.ndarray:
    return _CLASS_TO_LABEL[classes]


class EmptyPoolError(ValueError):
    pass


def mixed_batch_sampler(real_size: int, synth_size: int, batch_size: int, rng: np.random.Generator):
    """Pick ``batch_size`` (pool, index) pairs; with both pools present each
    slot picks real or synthetic with probability 1/2."""
    if real_size <= 0 and synth_size <= 0:
        raise EmptyPoolError("both sample pools are empty")
    out = []
    for _ in range(batch_size):
        if real_size and synth_size:
            pool = "real" if rng.uniform() < 0.5 else "synth"
        else:
            pool = "real" if real_size else "synth"
        out.append((pool, int(rng.integers(0, real_size if pool == "real" else synth_size))))
    return out


def pooled_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """Per foreground class Dice from counts pooled over all given pixels; 1 when both empty."""
    out = np.empty(num_classes - 1)
    for c in range(1, num_classes):
        p = pred == c
        t = truth == c
        denom = int(p.sum()) + int(t.sum())
        out[c - 1] = 1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom
    return out


def predict_classes(model: UNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax class map for z-scored (N,4,H,W) images."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(Tensor(images[start : start + batch_size].astype(np.float32)))[0]
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.int64)


def predict(model: "UNet | SegCheckpoint", image: np.ndarray) -> np.ndarray:
    """Label map in {0, 51, 102, 204} for one z-scored (4,H,W) slice."""
    if isinstance(model, SegCheckpoint):
        model = model.build_model()
    if image.ndim != 3 or image.shape[0] != model.config.in_channels:
        raise ValueError(f"expected a ({model.config.in_channels},H,W) slice, got {image.shape}")
    return classes_to_labels(predict_classes(model, image[None])[0])


def evaluate_dataset(model: UNet, dataset: SliceDataset) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("validation set is empty")
    images = np.stack([normalize_image(im) for im in dataset.images])
    pred = predict_classes(model, images)
    return pooled_dice(pred, labels_to_classes(dataset.annotations), model.config.num_classes)


@dataclass
class SegCheckpoint:
    unet_config: UNetConfig
    params: dict
    best_val_dice: float
    best_step: int
    best_val_per_class: list = field(default_factory=list)
    curve: list = field(default_factory=list)

    def build_model(self) -> UNet:
        model = build_unet(self.unet_config, 0)
        model.load_state_dict(self.params)
        return model

    def save(self, directory, extra: dict | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_parameters(d / "params.bin", self.params)
        meta = {
            "unet_config": self.unet_config.model_dump(mode="json"),
            "best_val_dice": self.best_val_dice,
            "best_val_per_class": self.best_val_per_class,
            "best_step": self.best_step,
        }
        meta.update(extra or {})
        (d / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        write_curve(d / "curve.csv", self.curve)

    @classmethod
    def load(cls, directory) -> "SegCheckpoint":
        d = Path(directory)
        meta = json.loads((d / "checkpoint.json").read_text())
        params = dict(load_parameters(d / "params.bin"))
        curve = read_curve(d / "curve.csv") if (d / "curve.csv").exists() else []
        return cls(UNetConfig(**meta["unet_config"]), params, meta["best_val_dice"], meta["best_step"],
                   meta.get("best_val_per_class", []), curve)


CURVE_COLUMNS = ["step", "lr", "train_loss", "val_dice_ncr", "val_dice_ed", "val_dice_et"]


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for row in curve:
            fh.write(",".join("" if row.get(c) is None else repr(row[c]) for c in CURVE_COLUMNS) + "\n")


def read_curve(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {}
        for c, v in zip(CURVE_COLUMNS, vals):
            row[c] = None if v == "" else (int(v) if c == "step" else float(v))
        rows.append(row)
    return rows


def _clip_gradients(model: UNet, max_norm: float) -> float:
    params = model.parameters()
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


def train_segmenter(real: SliceDataset | None, synth: SliceDataset | None, val: SliceDataset,
                    unet_config: UNetConfig, config: TrainConfig, augment_config: AugmentConfig | None = None,
                    seed: int | None = None, dump_augment=None) -> SegCheckpoint:
    """Train one U-Net; the returned checkpoint holds the best-validation parameters."""
    augment_config = augment_config or AugmentConfig()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    model = build_unet(unet_config, np.random.default_rng(rng.integers(2**63)))
    opt = SGDNesterov(model, config.lr0, config.momentum, config.weight_decay)
    real_n = len(real) if real is not None else 0
    synth_n = len(synth) if synth is not None else 0
    if real_n == 0 and synth_n == 0:
        raise EmptyPoolError("no training data")

    total_steps = config.total_steps
    curve: list[dict] = []
    val_scores = evaluate_dataset(model, val)
    best = (float(val_scores.mean()), 0, val_scores.tolist(), model.state_dict())
    curve.append({"step": 0, "lr": None, "train_loss": None, **_val_cols(val_scores)})
    started = time.monotonic()
    dumped = 0
    for step in range(total_steps):
        if config.wall_clock_seconds is not None and time.monotonic() - started > config.wall_clock_seconds:
            logger.info("wall-clock cap reached after %d steps", step)
            break
        lr = poly_lr(step, total_steps, config.lr0, config.poly_exponent)
        picks = mixed_batch_sampler(real_n, synth_n, config.batch_size, rng)
        images, targets = [], []
        for pool, idx in picks:
            src = real if pool == "real" else synth
            x, t = augment(src.images[idx], src.annotations[idx], augment_config, rng)
            if dump_augment is not None and dumped < dump_augment[1]:
                dump_augment[0](src.images[idx], src.annotations[idx], x, t, dumped)
                dumped += 1
            images.append(x)
            targets.append(labels_to_classes(t))
        opt.zero_grad()
        loss = deep_supervision_loss(model(Tensor(np.stack(images))), np.stack(targets),
                                     config.normalize_ds_weights, config.dice_smooth)
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"segmentation loss is not finite at step {step}")
        loss.backward()
        if config.grad_clip:
            _clip_gradients(model, config.grad_clip)
        opt.step(lr)
        row = {"step": step + 1, "lr": lr, "train_loss": float(loss.data),
               "val_dice_ncr": None, "val_dice_ed": None, "val_dice_et": None}
        if (step + 1) % config.val_interval == 0 or step + 1 == total_steps:
            val_scores = evaluate_dataset(model, val)
            row.update(_val_cols(val_scores))
            if val_scores.mean() > best[0]:
                best = (float(val_scores.mean()), step + 1, val_scores.tolist(), model.state_dict())
        curve.append(row)
    return SegCheckpoint(unet_config, best[3], best[0], best[1], best[2], curve)


def _val_cols(scores: np.ndarray) -> dict:
    return {"val_dice_ncr": float(scores[0]), "val_dice_ed": float(scores[1]), "val_dice_et": float(scores[2])}
