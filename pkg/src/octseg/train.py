"""Adam optimization loop with validation-loss checkpointing and early stopping."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import Batch, DatasetSplit, MaskVolume, Volume, iterate_batches
from .evaluate import ConfusionCounts, binarize, confusion_counts, metrics_from_counts
from .losses import LossConfig, combined_loss, loss_preset
from .model import Checkpoint, ModelConfig, UNet, init_model, save_checkpoint
from .preprocess import TransformSpec

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 15
    max_epochs: int = 100
    loss: LossConfig = field(default_factory=lambda: loss_preset(4))
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")
        if not 0 <= self.threshold <= 1:
            raise ConfigurationError("threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "patience": self.patience,
            "max_epochs": self.max_epochs,
            "loss": {"id": self.loss.id, "w_bce": self.loss.w_bce, "w_dice": self.loss.w_dice,
                     "dice_smooth": self.loss.dice_smooth},
            "seed": self.seed,
            "threshold": self.threshold,
        }


@dataclass
class TrainState:
    model: UNet
    adam_m: dict[str, torch.Tensor]
    adam_v: dict[str, torch.Tensor]
    step: int = 0
    epoch: int = 0
    best_val_loss: float = float("inf")
    epochs_since_improve: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: UNet) -> "TrainState":
        params = dict(model.named_parameters())
        return cls(
            model,
            {k: torch.zeros_like(p) for k, p in params.items()},
            {k: torch.zeros_like(p) for k, p in params.items()},
        )

    def fingerprint(self) -> str:
        """Hash of parameters, buffers and optimizer moments."""
        h = hashlib.sha256()
        for name, t in self.model.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        for d in (self.adam_m, self.adam_v):
            for name in sorted(d):
                h.update(d[name].cpu().numpy().tobytes())
        h.update(str(self.step).encode())
        return h.hexdigest()


def adam_update(state: TrainState, grads: dict[str, torch.Tensor], config: TrainConfig) -> TrainState:
    """One bias-corrected Adam step applied in place to ``state.model``."""
    params = dict(state.model.named_parameters())
    step = state.step + 1
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name} at step {step}")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
            m = state.adam_m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.adam_v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(config.learning_rate * (m / c1) / ((v / c2).sqrt() + config.adam_eps))
    state.step = step
    return state


def _tensors(batch: Batch, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(batch.images).to(dtype), torch.from_numpy(batch.masks).to(dtype)


def train_step(state: TrainState, batch: Batch, config: TrainConfig) -> float:
    model = state.model
    model.train()
    x, y = _tensors(batch, next(model.parameters()).dtype)
    loss = combined_loss(config.loss, model(x), y)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params)
    adam_update(state, dict(zip(names, grads)), config)
    return float(loss.detach())


def train_epoch(state: TrainState, batches: Iterable[Batch], config: TrainConfig) -> tuple[TrainState, float]:
    losses = [train_step(state, b, config) for b in batches]
    if not losses:
        raise ConfigurationError("training epoch received no batches")
    state.epoch += 1
    return state, float(np.mean(losses))


@torch.no_grad()
def validate(state: TrainState, val_batches: Iterable[Batch], config: TrainConfig) -> tuple[float, dict]:
    """Eval-mode loss and volume-pooled thresholded metrics; mutates nothing."""
    model = state.model
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    losses = []
    counts: dict[str, ConfusionCounts] = defaultdict(ConfusionCounts)
    for batch in val_batches:
        x, y = _tensors(batch, dtype)
        logits = model(x)
        losses.append(float(combined_loss(config.loss, logits, y)))
        pred = binarize(torch.sigmoid(logits), config.threshold)
        for i, (vid, _) in enumerate(batch.source):
            counts[vid] = counts[vid] + confusion_counts(pred[i], batch.masks[i])
    model.train(was_training)
    if not losses:
        raise ConfigurationError("validation set is empty")
    scores = np.array([metrics_from_counts(c) for c in counts.values()])
    dsc, precision, recall = scores.mean(axis=0)
    return float(np.mean(losses)), {"dsc": float(dsc), "precision": float(precision), "recall": float(recall)}


class EarlyStopping:
    """Strict-improvement tracker on validation loss."""

    def __init__(self, patience: int = 15):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def _write_json_atomic(path: Path, payload) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        json.dump(payload, f, indent=2)
    os.replace(tmp, path)


def _select(pairs, ids):
    by_id = {v.id: (v, m) for v, m in pairs}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigurationError(f"split references unknown volumes: {missing}")
    return [by_id[i] for i in ids]


def fit(
    pairs: Sequence[tuple[Volume, MaskVolume]],
    split: DatasetSplit,
    transform: TransformSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    initial: Checkpoint | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Train until early stopping or ``max_epochs``; returns the best checkpoint and history."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_pairs = _select(pairs, split.train_ids)
    val_pairs = _select(pairs, split.val_ids)
    if not train_pairs or not val_pairs:
        raise ConfigurationError("fit needs non-empty train and val splits")

    torch.manual_seed(train_config.seed)
    if initial is not None:
        model = initial.build_model()
        model_config = initial.config
    else:
        model = init_model(model_config, train_config.seed)
    state = TrainState.fresh(model)
    stopper = EarlyStopping(train_config.patience)
    ckpt_path = out_dir / "best.ckpt"
    history_path = out_dir / "history.json"
    best: Checkpoint | None = None
    channels = model_config.in_channels

    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        batches = iterate_batches(train_pairs, transform, train_config.batch_size, shuffle=True,
                                  seed=train_config.seed * 100_003 + epoch, channels=channels)
        state, train_loss = train_epoch(state, batches, train_config)
        val_loss, val_metrics = validate(
            state, iterate_batches(val_pairs, transform, train_config.batch_size, channels=channels),
            train_config,
        )
        improved, stop = stopper.update(epoch, val_loss)
        state.best_val_loss = stopper.best
        state.epochs_since_improve = stopper.wait
        if improved:
            best = Checkpoint.from_model(
                state.model, epoch=epoch, val_loss=val_loss, loss_config_id=train_config.loss.id,
                seed=train_config.seed, extra={"transform": transform.to_dict(), "val_metrics": val_metrics},
            )
            save_checkpoint(best, ckpt_path)
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            **val_metrics,
            "improved": improved,
            "seconds": time.perf_counter() - t0,
        }
        state.history.append(record)
        _write_json_atomic(history_path, state.history)
        log.info("epoch %d train %.4f val %.4f dsc %.3f%s", epoch, train_loss, val_loss,
                 val_metrics["dsc"], " *" if improved else "")
        if stop:
            log.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    if best is None:
        raise FloatingPointError("validation loss never became finite; no checkpoint written")
    return best, state.history
