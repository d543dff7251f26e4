from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from ..dataio.types import SliceDataset
from ..seeding import derive_seed
from .models import GanConfig
from .train import GanCheckpoint, sample_synthetic, train_gan

logger = logging.getLogger(__name__)


def partition_quota(budget: int, k: int) -> list[int]:
    """Split ``budget`` images over ``k`` members; the first budget % k get one extra."""
    if k <= 0:
        raise ValueError(f"member count must be >= 1, got {k}")
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    base, extra = divmod(budget, k)
    return [base + 1 if i < extra else base for i in range(k)]


def member_seed(master_seed: int, k: int) -> int:
    return derive_seed(master_seed, "gan-member", k)


@dataclass
class EnsembleSpec:
    k: int
    budget: int
    member_seeds: list[int]
    sampling_seed: int = 0
    quotas: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("ensemble needs at least one member")
        if len(self.member_seeds) != self.k:
            raise ValueError(f"{self.k} members but {len(self.member_seeds)} seeds")
        if len(set(self.member_seeds)) != self.k:
            raise ValueError("member seeds must be pairwise distinct")
        if not self.quotas:
            self.quotas = partition_quota(self.budget, self.k)
        if sum(self.quotas) != self.budget or len(self.quotas) != self.k:
            raise ValueError("quotas must have one entry per member and sum to the budget")

    @classmethod
    def from_master(cls, master_seed: int, k: int, budget: int) -> "EnsembleSpec":
        return cls(k, budget, [member_seed(master_seed, i) for i in range(k)],
                   sampling_seed=derive_seed(master_seed, "synth", k))


class EnsembleTrainingError(RuntimeError):
    def __init__(self, failed: dict[int, str], completed: dict[int, GanCheckpoint]):
        self.failed = failed
        self.completed = completed
        super().__init__(f"ensemble members failed: {sorted(failed)}")


def _train_member(args):
    dataset, config, member = args
    return member, train_gan(dataset, config, member=member)


def train_ensemble(dataset: SliceDataset, spec: EnsembleSpec, gan_config: GanConfig,
                   workers: int = 1) -> list[GanCheckpoint]:
    """Train every member with its own seed; members share no state."""
    jobs = [(dataset, gan_config.model_copy(update={"seed": seed}), i) for i, seed in enumerate(spec.member_seeds)]
    completed: dict[int, GanCheckpoint] = {}
    failed: dict[int, str] = {}
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = {pool.submit(_train_member, job): job[2] for job in jobs}
            for fut, i in futures.items():
                try:
                    completed[i] = fut.result()[1]
                except Exception as exc:  # noqa: BLE001 - recorded per member
                    failed[i] = repr(exc)
    else:
        for job in jobs:
            try:
                completed[job[2]] = _train_member(job)[1]
            except Exception as exc:  # noqa: BLE001
                logger.error("member %d failed: %s", job[2], exc)
                failed[job[2]] = repr(exc)
    if failed:
        raise EnsembleTrainingError(failed, completed)
    return [completed[i] for i in range(spec.k)]


def generate_ensemble_dataset(checkpoints: list[GanCheckpoint], spec: EnsembleSpec) -> SliceDataset:
    """Concatenate quota-sized samples from each member, tagged with the member index."""
    if len(checkpoints) != spec.k:
        raise ValueError(f"spec has {spec.k} members, got {len(checkpoints)} checkpoints")
    parts = [
        sample_synthetic(ckpt, quota, derive_seed(spec.sampling_seed, i), member=i)
        for i, (ckpt, quota) in enumerate(zip(checkpoints, spec.quotas))
    ]
    manifest = {"k": spec.k, "budget": spec.budget, "quotas": spec.quotas, "member_seeds": spec.member_seeds,
                "sampling_seed": spec.sampling_seed}
    return SliceDataset.concatenate(parts, manifest)
