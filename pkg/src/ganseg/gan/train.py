"""WGAN-GP training with progressive growth, checkpoints and sampling."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..dataio.types import PALETTE, SliceDataset
from ..numerics import functional as F
from ..numerics.optim import Adam
from ..numerics.serialize import load_parameters, save_parameters
from ..numerics.tensor import NonFiniteError, Tensor, grad, no_grad
from ..seeding import rng_for
from .models import Discriminator, GanConfig, Generator, progressive_schedule

logger = logging.getLogger(__name__)

_EDGES = np.array([(a + b) / 2.0 for a, b in zip(PALETTE[:-1], PALETTE[1:])])


class GanDivergenceError(RuntimeError):
    pass


def threshold_annotations(values) -> np.ndarray:
    """Map each value to the nearest of {0, 51, 102, 204}; exact midpoints go up."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(_EDGES, v, side="right")
    return np.asarray(PALETTE, dtype=np.uint8)[idx]


def to_unit_range(five_channel: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1]."""
    return (five_channel.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def from_unit_range(x: np.ndarray) -> np.ndarray:
    return (x.astype(np.float64) + 1.0) * 127.5


def gradient_penalty(critic: Callable[[Tensor], Tensor], real: np.ndarray, fake: np.ndarray,
                     mix: np.ndarray, create_graph: bool = True) -> tuple[Tensor, np.ndarray]:
    """mean((||d critic / d x_hat|| - 1)^2) at x_hat = mix*real + (1-mix)*fake."""
    x_hat = Tensor(mix * real + (1.0 - mix) * fake, requires_grad=True)
    scores = critic(x_hat)
    (g,) = grad(scores.sum(), [x_hat], create_graph=create_graph)
    axes = tuple(range(1, g.ndim))
    norms = ((g * g).sum(axis=axes) + 1e-12).sqrt()
    penalty = ((norms - 1.0) ** 2).mean()
    return penalty, norms.data


def prepare_real(batch: np.ndarray, resolution: int, alpha: float) -> np.ndarray:
    """Pool a batch down to ``resolution``; during fade-in blend with the coarser level."""
    factor = batch.shape[-1] // resolution
    x = F.downsample(Tensor(batch), factor).data
    if alpha < 1.0:
        coarse = F.upsample_nearest(F.avg_pool2(Tensor(x)), 2).data
        x = alpha * x + (1.0 - alpha) * coarse
    return x.astype(np.float32)


def wgan_gp_step(generator: Generator, discriminator: Discriminator, opt_g: Adam, opt_d: Adam,
                 real: np.ndarray, rng: np.random.Generator, resolution: int, alpha: float,
                 config: GanConfig) -> dict:
    """One critic update followed by one generator update."""
    n = real.shape[0]
    z = rng.normal(size=(n, config.latent_dim)).astype(np.float32)
    with no_grad():
        fake = generator(Tensor(z), resolution, alpha).data

    def critic(x):
        return discriminator(x, resolution, alpha)

    opt_d.zero_grad()
    d_real = critic(Tensor(real))
    d_fake = critic(Tensor(fake))
    mix = rng.uniform(size=(n, 1, 1, 1)).astype(np.float32)
    gp, _ = gradient_penalty(critic, real, fake, mix)
    d_loss = d_fake.mean() - d_real.mean() + gp * config.gp_weight + (d_real * d_real).mean() * config.drift
    if not np.isfinite(d_loss.data):
        raise NonFiniteError("critic loss is not finite")
    d_loss.backward()
    opt_d.step()

    opt_g.zero_grad()
    z = rng.normal(size=(n, config.latent_dim)).astype(np.float32)
    g_scores = critic(generator(Tensor(z), resolution, alpha))
    g_loss = -g_scores.mean()
    if not np.isfinite(g_loss.data):
        raise NonFiniteError("generator loss is not finite")
    g_loss.backward()
    opt_g.step()
    discriminator.zero_grad()
    return {
        "d_loss": float(d_loss.data),
        "g_loss": float(g_loss.data),
        "d_real": float(d_real.data.mean()),
        "d_fake": float(d_fake.data.mean()),
        "gp": float(gp.data),
    }


@dataclass
class GanCheckpoint:
    config: GanConfig
    generator: dict
    discriminator: dict
    resolution: int
    alpha: float
    images_seen: int
    log: list = field(default_factory=list)
    member: int = -1

    @property
    def seed(self) -> int:
        return self.config.seed

    def build_generator(self) -> Generator:
        g = Generator(self.config, np.random.default_rng(0))
        g.load_state_dict(self.generator)
        return g

    def sidecar(self) -> dict:
        return {
            "seed": self.config.seed,
            "member": self.member,
            "resolution": self.resolution,
            "alpha": self.alpha,
            "images_seen": self.images_seen,
            "config": self.config.model_dump(mode="json"),
        }

    def save(self, directory, extra: dict | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        params = {f"G.{k}": v for k, v in self.generator.items()}
        params.update({f"D.{k}": v for k, v in self.discriminator.items()})
        save_parameters(d / "params.bin", params)
        meta = self.sidecar()
        meta.update(extra or {})
        (d / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        with open(d / "train_log.csv", "w") as fh:
            cols = ["step", "images_seen", "resolution", "alpha", "d_loss", "g_loss", "d_real", "d_fake", "gp"]
            fh.write(",".join(cols) + "\n")
            for row in self.log:
                fh.write(",".join(repr(row[c]) for c in cols) + "\n")

    @classmethod
    def load(cls, directory) -> "GanCheckpoint":
        d = Path(directory)
        meta = json.loads((d / "checkpoint.json").read_text())
        params = load_parameters(d / "params.bin")
        gen = {k[2:]: v for k, v in params.items() if k.startswith("G.")}
        disc = {k[2:]: v for k, v in params.items() if k.startswith("D.")}
        log = []
        log_path = d / "train_log.csv"
        if log_path.exists():
            lines = log_path.read_text().splitlines()
            cols = lines[0].split(",")
            for line in lines[1:]:
                vals = line.split(",")
                log.append({c: (int(v) if c in ("step", "images_seen", "resolution") else float(v))
                            for c, v in zip(cols, vals)})
        return cls(GanConfig(**meta["config"]), gen, disc, meta["resolution"], meta["alpha"],
                   meta["images_seen"], log, meta.get("member", -1))


def _real_pool(dataset: SliceDataset, config: GanConfig) -> np.ndarray:
    size = dataset.spatial_shape[0]
    if dataset.spatial_shape[0] != dataset.spatial_shape[1]:
        raise ValueError(f"GAN training needs square slices, got {dataset.spatial_shape}")
    if size % config.target_resolution:
        raise ValueError(f"slice size {size} is not a multiple of target resolution {config.target_resolution}")
    pool = to_unit_range(dataset.five_channel())
    return F.downsample(Tensor(pool), size // config.target_resolution).data.astype(np.float32)


def train_gan(dataset: SliceDataset, config: GanConfig, member: int = -1, max_images: int | None = None,
              checkpoint_dir=None, progress: Callable[[dict], None] | None = None) -> GanCheckpoint:
    """Run the progressive schedule to completion (or ``max_images``)."""
    if len(dataset) == 0:
        raise ValueError("cannot train a GAN on an empty dataset")
    pool = _real_pool(dataset, config)
    generator = Generator(config, rng_for(config.seed, "init-g"))
    discriminator = Discriminator(config, rng_for(config.seed, "init-d"))
    opt_g = Adam(generator, config.lr, config.beta1, config.beta2, config.eps)
    opt_d = Adam(discriminator, config.lr, config.beta1, config.beta2, config.eps)
    rng = rng_for(config.seed, "train")
    total = config.total_images if max_images is None else min(max_images, config.total_images)
    images_seen, step = 0, 0
    order = rng.permutation(len(pool))
    cursor = 0
    log: list[dict] = []
    next_ckpt = config.checkpoint_every or None
    resolution, alpha = progressive_schedule(0, config)

    def snapshot() -> GanCheckpoint:
        return GanCheckpoint(config, generator.state_dict(), discriminator.state_dict(), resolution, alpha,
                             images_seen, list(log), member)

    while images_seen < total:
        resolution, alpha = progressive_schedule(images_seen, config)
        n = config.batch_size
        if cursor + n > len(order):
            order = rng.permutation(len(pool))
            cursor = 0
        idx = order[cursor : cursor + n] if n <= len(order) else rng.integers(0, len(pool), n)
        cursor += n
        real = prepare_real(pool[idx], resolution, alpha)
        try:
            stats = wgan_gp_step(generator, discriminator, opt_g, opt_d, real, rng, resolution, alpha, config)
        except NonFiniteError as exc:
            if checkpoint_dir is not None:
                snapshot().save(Path(checkpoint_dir) / "diverged", {"error": str(exc)})
            raise GanDivergenceError(f"GAN (seed {config.seed}) diverged at step {step}: {exc}") from exc
        images_seen += n
        row = {"step": step, "images_seen": images_seen, "resolution": resolution, "alpha": alpha, **stats}
        log.append(row)
        if progress is not None:
            progress(row)
        step += 1
        if checkpoint_dir is not None and next_ckpt is not None and images_seen >= next_ckpt:
            snapshot().save(Path(checkpoint_dir) / "latest")
            next_ckpt += config.checkpoint_every
    resolution, alpha = progressive_schedule(images_seen, config)
    return snapshot()


def sample_synthetic(checkpoint: GanCheckpoint, n: int, sampling_seed: int, member: int | None = None,
                     batch_size: int = 64) -> SliceDataset:
    """Draw ``n`` 5-channel slices at the checkpoint's resolution."""
    member = checkpoint.member if member is None else member
    res = checkpoint.resolution
    if n <= 0:
        return SliceDataset.from_samples([], {"member": member, "sampling_seed": sampling_seed}, shape=(res, res))
    gen = checkpoint.build_generator()
    rng = np.random.default_rng(sampling_seed)
    chunks = []
    with no_grad():
        for start in range(0, n, batch_size):
            m = min(batch_size, n - start)
            z = rng.normal(size=(m, checkpoint.config.latent_dim)).astype(np.float32)
            chunks.append(gen(Tensor(z), res, checkpoint.alpha).data)
    out = from_unit_range(np.concatenate(chunks))
    images = np.clip(out[:, :4], 0.0, 255.0).astype(np.float32)
    annotations = threshold_annotations(out[:, 4])
    ids = [f"synth-m{member}"] * n
    return SliceDataset(images, annotations, ids, np.arange(n), np.full(n, member),
                        {"member": member, "sampling_seed": sampling_seed})
