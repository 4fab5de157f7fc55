"""Binary cross-entropy, soft Dice and their weighted presets."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    id: int
    w_bce: float
    w_dice: float
    dice_smooth: float = 1.0

    @property
    def label(self) -> str:
        if self.w_dice == 0:
            return "BCE"
        if self.w_bce == 0:
            return "DLS"
        if self.w_bce == self.w_dice:
            return "BCE + DLS"
        return f"BCE ({self.w_bce:g}) + DLS ({self.w_dice:g})"


PRESETS = {
    1: (1.0, 0.0),
    2: (0.0, 1.0),
    3: (0.5, 0.5),
    4: (0.7, 0.3),
    5: (0.3, 0.7),
}


def loss_preset(preset_id: int, dice_smooth: float = 1.0) -> LossConfig:
    try:
        w_bce, w_dice = PRESETS[int(preset_id)]
    except (KeyError, ValueError):
        raise ConfigurationError(f"unknown loss preset {preset_id!r}; expected 1..5") from None
    return LossConfig(int(preset_id), w_bce, w_dice, dice_smooth)


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel BCE evaluated directly from logits (log-sum-exp form)."""
    _check(logits, targets)
    targets = targets.to(logits.dtype)
    # softplus(z) - z*y; the max(z,0) + log1p(exp(-|z|)) form has a wrong subgradient at z == 0
    per_pixel = F.softplus(logits) - logits * targets
    return per_pixel.mean()


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps), summed over the whole batch."""
    _check(probs, targets)
    targets = targets.to(probs.dtype)
    inter = (probs * targets).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + targets.sum() + smooth)


def combined_loss(config: LossConfig, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if config.id not in PRESETS:
        raise ConfigurationError(f"unknown loss preset {config.id!r}; expected 1..5")
    total = logits.new_zeros(())
    if config.w_bce:
        total = total + config.w_bce * bce_loss(logits, targets)
    if config.w_dice:
        total = total + config.w_dice * dice_loss(torch.sigmoid(logits), targets, config.dice_smooth)
    return total
