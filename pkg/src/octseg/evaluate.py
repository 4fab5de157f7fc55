"""Thresholding, pooled confusion-count metrics, per-volume reports and timing."""

from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Volume, MaskVolume
from .model import Checkpoint, UNet
from .preprocess import TransformSpec, apply_transform


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class VolumeMetrics:
    volume_id: str
    dsc: float
    precision: float
    recall: float
    seconds_total: float = 0.0
    seconds_per_slice: float = 0.0
    slice_count: int = 0
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)


@dataclass
class MetricsReport:
    per_volume: list[VolumeMetrics]
    mean_dsc: float
    mean_precision: float
    mean_recall: float
    loss_config_id: int = 0
    checkpoint: str = ""
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "loss_config_id": self.loss_config_id,
            "checkpoint": self.checkpoint,
            "threshold": self.threshold,
            "timing_scope": "preprocess + forward + threshold, excluding disk I/O and checkpoint load",
            "per_volume": [
                {
                    "volume_id": v.volume_id,
                    "dsc": v.dsc,
                    "precision": v.precision,
                    "recall": v.recall,
                    "seconds_total": v.seconds_total,
                    "seconds_per_slice": v.seconds_per_slice,
                    "slice_count": v.slice_count,
                    "counts": asdict(v.counts),
                }
                for v in self.per_volume
            ],
            "mean_dsc": self.mean_dsc,
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """1 where prob > threshold (strict), else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError(f"threshold {threshold} outside [0, 1]")
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    return (np.asarray(probs) > threshold).astype(np.uint8)


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def metrics_from_counts(c: ConfusionCounts) -> tuple[float, float, float]:
    """(dsc, precision, recall); an empty prediction on an empty target scores 1."""
    if c.tp == 0 and c.fp == 0 and c.fn == 0:
        return 1.0, 1.0, 1.0
    dsc = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return dsc, precision, recall


def _model_of(model_or_ckpt) -> UNet:
    if isinstance(model_or_ckpt, Checkpoint):
        return model_or_ckpt.build_model()
    return model_or_ckpt


@torch.no_grad()
def predict_volume(model: UNet, volume: Volume, transform: TransformSpec, threshold: float = 0.5,
                   batch_size: int = 16, mask: MaskVolume | None = None):
    """Binary predictions (S x h x w) and, when ``mask`` is given, pooled counts."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError(f"threshold {threshold} outside [0, 1]")
    transform.check_input(volume.slices.shape[1], volume.slices.shape[2])
    model.eval()
    dtype = next(model.parameters()).dtype
    channels = model.config.in_channels
    h, w = transform.output_shape
    preds = np.empty((len(volume), h, w), dtype=np.uint8)
    counts = ConfusionCounts()
    for start in range(0, len(volume), batch_size):
        stop = min(start + batch_size, len(volume))
        images = np.empty((stop - start, channels, h, w), dtype=np.float32)
        gts = []
        for b, s in enumerate(range(start, stop)):
            img, m = apply_transform(volume.slices[s], None if mask is None else mask.labels[s], transform)
            images[b] = img[None]
            gts.append(m)
        probs = torch.sigmoid(model(torch.from_numpy(images).to(dtype)))
        pred = binarize(probs[:, 0], threshold)
        preds[start:stop] = pred
        if mask is not None:
            counts = counts + confusion_counts(pred, np.stack(gts))
    return preds, counts


def evaluate_volume(model_or_ckpt, volume: Volume, mask: MaskVolume, transform: TransformSpec,
                    threshold: float = 0.5, batch_size: int = 16) -> VolumeMetrics:
    """Pool confusion counts over every slice of the volume, then score once."""
    if volume.shape != mask.shape:
        raise ValueError(f"{volume.id}: volume {volume.shape} vs mask {mask.shape}")
    model = _model_of(model_or_ckpt)
    t0 = time.perf_counter()
    _, counts = predict_volume(model, volume, transform, threshold, batch_size, mask)
    elapsed = time.perf_counter() - t0
    dsc, precision, recall = metrics_from_counts(counts)
    return VolumeMetrics(volume.id, dsc, precision, recall, elapsed, elapsed / len(volume),
                         len(volume), counts)


def report_from_volumes(per_volume: list[VolumeMetrics], **meta) -> MetricsReport:
    if not per_volume:
        raise ConfigurationError("no volumes to average")
    return MetricsReport(
        per_volume,
        float(np.mean([v.dsc for v in per_volume])),
        float(np.mean([v.precision for v in per_volume])),
        float(np.mean([v.recall for v in per_volume])),
        **meta,
    )


def evaluate_set(model_or_ckpt, pairs: Sequence[tuple[Volume, MaskVolume]], transform: TransformSpec,
                 threshold: float = 0.5, checkpoint_ref: str = "") -> MetricsReport:
    if not pairs:
        raise ConfigurationError("evaluation set is empty")
    model = _model_of(model_or_ckpt)
    per_volume = [evaluate_volume(model, v, m, transform, threshold) for v, m in pairs]
    loss_id = model_or_ckpt.loss_config_id if isinstance(model_or_ckpt, Checkpoint) else 0
    return report_from_volumes(per_volume, loss_config_id=loss_id, checkpoint=checkpoint_ref,
                               threshold=threshold)


def host_descriptor() -> str:
    return (f"{platform.node()} {platform.machine()} {platform.processor() or platform.system()} "
            f"python {platform.python_version()} torch {torch.__version__} "
            f"threads {torch.get_num_threads()}")


def benchmark_inference(model_or_ckpt, volume: Volume, transform: TransformSpec, repeats: int = 3,
                        threshold: float = 0.5, batch_size: int = 16) -> dict:
    """Time preprocess + forward + threshold over the whole volume.

    The model is built before timing and one untimed warm-up pass runs first.
    """
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    model = _model_of(model_or_ckpt)
    predict_volume(model, volume, transform, threshold, batch_size)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict_volume(model, volume, transform, threshold, batch_size)
        samples.append(time.perf_counter() - t0)
    n = len(volume)
    totals = np.array(samples)
    return {
        "volume_id": volume.id,
        "slices": n,
        "input_shape": list(volume.shape),
        "batch_size": batch_size,
        "repeats": repeats,
        "samples_seconds_total": [float(s) for s in samples],
        "seconds_total": {"min": float(totals.min()), "mean": float(totals.mean()), "max": float(totals.max())},
        "seconds_per_slice": {
            "min": float(totals.min() / n), "mean": float(totals.mean() / n), "max": float(totals.max() / n)
        },
        "host": host_descriptor(),
    }


def format_table(rows: Sequence[tuple[int, MetricsReport]], with_time: bool = False) -> str:
    """Rows shaped like the per-configuration results tables."""
    header = f"{'Train':>5} | {'DSC':>6} | {'Precision':>9} | {'Recall':>6}"
    if with_time:
        header += f" | {'Inference (s)':>13}"
    lines = [header, "-" * len(header)]
    for loss_id, rep in rows:
        line = f"{loss_id:>5} | {rep.mean_dsc:6.3f} | {rep.mean_precision:9.3f} | {rep.mean_recall:6.3f}"
        if with_time:
            mean_t = float(np.mean([v.seconds_total for v in rep.per_volume]))
            line += f" | {mean_t:13.3f}"
        lines.append(line)
    return "\n".join(lines)
