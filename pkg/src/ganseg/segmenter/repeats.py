"""Repeated segmenter trainings with per-repeat persistence so sweeps resume."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..augment import AugmentConfig, normalize_image
from ..dataio.types import SliceDataset
from ..evaluation import DiceReport, aggregate_runs, dice_per_subject
from ..seeding import derive_seed
from .train import SegCheckpoint, TrainConfig, classes_to_labels, predict_classes, train_segmenter
from .unet import UNet, UNetConfig

logger = logging.getLogger(__name__)

RESULT_FILE = "result.json"


def repeat_seed(master_seed: int, repeat: int) -> int:
    return derive_seed(master_seed, "seg-repeat", repeat)


def evaluate_test(model: UNet, test: SliceDataset, run_id: str = "", seed: int | None = None) -> DiceReport:
    """Per-subject Dice of ``model`` on every slice of ``test``."""
    images = np.stack([normalize_image(im) for im in test.images])
    pred = classes_to_labels(predict_classes(model, images))
    return dice_per_subject(pred, test.annotations, test.subject_ids, test.z, run_id=run_id, seed=seed)


@dataclass
class RepeatOutcome:
    repeat: int
    seed: int
    status: str  # "ok" or "failed"
    report: DiceReport | None = None
    best_val_dice: float | None = None
    best_step: int | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {"repeat": self.repeat, "seed": self.seed, "status": self.status,
                "report": None if self.report is None else self.report.to_json(),
                "best_val_dice": self.best_val_dice, "best_step": self.best_step, "error": self.error}

    @classmethod
    def from_json(cls, data: dict) -> "RepeatOutcome":
        report = None if data.get("report") is None else DiceReport.from_json(data["report"])
        return cls(data["repeat"], data["seed"], data["status"], report, data.get("best_val_dice"),
                   data.get("best_step"), data.get("error"))


def _run_one(args) -> RepeatOutcome:
    (r, seed, real, synth, val, test, unet_config, train_config, augment_config, directory, provenance) = args
    try:
        ckpt = train_segmenter(real, synth, val, unet_config, train_config, augment_config, seed=seed)
        report = evaluate_test(ckpt.build_model(), test, run_id=str(r), seed=seed)
    except Exception as exc:  # recorded so the sweep continues
        logger.exception("repeat %d failed", r)
        outcome = RepeatOutcome(r, seed, "failed", error=f"{type(exc).__name__}: {exc}")
    else:
        outcome = RepeatOutcome(r, seed, "ok", report, ckpt.best_val_dice, ckpt.best_step)
        logger.info("repeat %d: best validation Dice %.4f at step %d, test mean %.4f", r, ckpt.best_val_dice,
                    ckpt.best_step, report.overall_mean)
        if directory is not None:
            ckpt.save(directory, {**provenance, "seed": seed, "repeat": r})
    if directory is not None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        payload = {**provenance, **outcome.to_json()}
        tmp = d / (RESULT_FILE + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        tmp.replace(d / RESULT_FILE)
    return outcome


def load_outcome(directory, provenance: dict | None = None) -> RepeatOutcome | None:
    """A completed outcome stored in ``directory``, or None if absent, failed or stale."""
    path = Path(directory) / RESULT_FILE
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    if provenance and any(data.get(k) != v for k, v in provenance.items()):
        return None
    if data.get("status") != "ok" or not (Path(directory) / "params.bin").exists():
        return None
    return RepeatOutcome.from_json(data)


def run_repeats(real: SliceDataset | None, synth: SliceDataset | None, val: SliceDataset, test: SliceDataset,
                unet_config: UNetConfig, train_config: TrainConfig, n_repeats: int | None = None,
                master_seed: int | None = None, augment_config: AugmentConfig | None = None, out_dir=None,
                provenance: dict | None = None, workers: int = 1) -> list[RepeatOutcome]:
    """Train ``n_repeats`` segmenters with seeds derived from ``master_seed``.

    With ``out_dir``, each repeat writes ``<out_dir>/<r>/`` and completed
    repeats (matching ``provenance``) are loaded instead of retrained.
    """
    n_repeats = train_config.repeats if n_repeats is None else n_repeats
    if n_repeats < 1:
        raise ValueError("n_repeats must be at least 1")
    master_seed = train_config.seed if master_seed is None else master_seed
    provenance = dict(provenance or {})
    outcomes: dict[int, RepeatOutcome] = {}
    jobs = []
    for r in range(n_repeats):
        seed = repeat_seed(master_seed, r)
        directory = None if out_dir is None else Path(out_dir) / str(r)
        if directory is not None:
            done = load_outcome(directory, provenance)
            if done is not None and done.seed == seed:
                logger.info("repeat %d already complete", r)
                outcomes[r] = done
                continue
        jobs.append((r, seed, real, synth, val, test, unet_config, train_config, augment_config, directory,
                     provenance))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for outcome in pool.map(_run_one, jobs):
                outcomes[outcome.repeat] = outcome
    else:
        for job in jobs:
            outcome = _run_one(job)
            outcomes[outcome.repeat] = outcome
    return [outcomes[r] for r in range(n_repeats)]


def summarize(outcomes: list[RepeatOutcome]):
    """Aggregate of the successful repeats' per-class subject means."""
    return aggregate_runs([o.report.class_means() for o in outcomes if o.status == "ok"])
