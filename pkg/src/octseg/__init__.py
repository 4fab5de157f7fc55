"""Inclusion-defect segmentation of OCT B-scan volumes with a U-Net."""

from .data import (
    Batch,
    BoxAnnotation,
    DatasetSplit,
    MaskVolume,
    SyntheticSpec,
    Volume,
    generate_synthetic,
    iterate_batches,
    load_annotations,
    load_volume,
    rasterize_boxes,
    split_dataset,
)
from .evaluate import (
    ConfusionCounts,
    MetricsReport,
    VolumeMetrics,
    benchmark_inference,
    binarize,
    confusion_counts,
    evaluate_set,
    evaluate_volume,
    metrics_from_counts,
)
from .losses import LossConfig, bce_loss, combined_loss, dice_loss, loss_preset
from .model import (
    Checkpoint,
    ModelConfig,
    UNet,
    count_parameters,
    forward,
    init_model,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from .preprocess import TransformSpec, apply_transform, crop, pad_width
from .train import TrainConfig, TrainState, adam_update, fit, train_epoch, validate

__version__ = "0.1.0"
