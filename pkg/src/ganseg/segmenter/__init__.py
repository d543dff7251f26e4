from .losses import combined_loss, deep_supervision_loss, deep_supervision_weights, downsample_target
from .repeats import RepeatOutcome, evaluate_test, load_outcome, repeat_seed, run_repeats, summarize
from .train import (
    CURVE_COLUMNS,
    EmptyPoolError,
    SegCheckpoint,
    TrainConfig,
    classes_to_labels,
    evaluate_dataset,
    labels_to_classes,
    mixed_batch_sampler,
    pooled_dice,
    predict,
    predict_classes,
    train_segmenter,
)
from .unet import UNet, UNetConfig, build_unet
