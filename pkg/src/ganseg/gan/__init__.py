from .ensemble import (
    EnsembleSpec,
    EnsembleTrainingError,
    generate_ensemble_dataset,
    member_seed,
    partition_quota,
    train_ensemble,
)
from .models import (
    Discriminator,
    GanConfig,
    Generator,
    build_discriminator,
    build_generator,
    progressive_schedule,
)
from .train import (
    GanCheckpoint,
    GanDivergenceError,
    gradient_penalty,
    sample_synthetic,
    threshold_annotations,
    train_gan,
    wgan_gp_step,
)
