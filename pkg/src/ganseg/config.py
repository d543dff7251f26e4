"""Experiment configuration: one JSON document drives every pipeline stage."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .augment import AugmentConfig
from .gan.models import GanConfig
from .segmenter.train import TrainConfig
from .segmenter.unet import UNetConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhantomConfig(_Strict):
    n_train: int = Field(20, ge=1)
    n_test: int = Field(8, ge=1)
    dims: tuple[int, int, int] = (32, 32, 24)


class DatasetConfig(_Strict):
    source: str = Field("phantom", pattern="^(phantom|ingest)$")
    phantom: PhantomConfig = PhantomConfig()
    train_dir: str | None = None
    test_dir: str | None = None


class PreprocessConfig(_Strict):
    fraction: float = Field(0.15, gt=0, le=1)
    threshold: float = 50.0
    pad_size: int | None = None  # None pads to the next power of two


class EnsembleConfig(_Strict):
    k_values: list[int] = [1, 4]
    budget: int = Field(2000, ge=1)

    @model_validator(mode="after")
    def _positive(self):
        if not self.k_values or min(self.k_values) < 1:
            raise ValueError("k_values must be a non-empty list of positive integers")
        if len(set(self.k_values)) != len(self.k_values):
            raise ValueError("k_values must not repeat")
        return self


class SweepConfig(_Strict):
    """Which training-data configurations to run (rows of the result table)."""

    real_only: bool = False
    mixed: bool = True
    synthetic_only: bool = True


class EvalConfig(_Strict):
    pairing: str = Field("subject", pattern="^(subject|run)$")
    alternative: str = Field("two-sided", pattern="^(two-sided|greater)$")
    n_permutations: int = Field(2**20, ge=1)
    dump_overlays: int = Field(0, ge=0)


class ExperimentConfig(_Strict):
    dataset: DatasetConfig = DatasetConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    gan: GanConfig = GanConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    unet: UNetConfig = UNetConfig()
    train: TrainConfig = TrainConfig()
    augment: AugmentConfig = AugmentConfig()
    sweep: SweepConfig = SweepConfig()
    evaluation: EvalConfig = EvalConfig()
    seed: int = 0
    output_dir: str = "out"

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Hash of everything except the output location."""
        data = self.model_dump(mode="json")
        data.pop("output_dir")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def seg_configs(self) -> list[tuple[str, bool, int]]:
        """(config id, uses real data, number of GANs) for every sweep row."""
        rows = []
        if self.sweep.real_only:
            rows.append(("real", True, 0))
        ks = sorted(self.ensemble.k_values)
        if self.sweep.mixed:
            rows += [(f"mixed-k{k}", True, k) for k in ks]
        if self.sweep.synthetic_only:
            rows += [(f"synth-k{k}", False, k) for k in ks]
        return rows


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.model_validate_json(Path(path).read_text())


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
