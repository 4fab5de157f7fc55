"""Static overlay rendering of masks on gray B-scans."""

from __future__ import annotations

import numpy as np

# BGR, as written by cv2
PRED_COLOR = (0, 0, 255)
GT_COLOR = (0, 255, 0)


def gray_to_bgr(slice_: np.ndarray) -> np.ndarray:
    """[H, W] float in [0, 1] or uint8 -> [H, W, 3] uint8."""
    if slice_.dtype != np.uint8:
        slice_ = np.round(np.clip(slice_, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.repeat(slice_[:, :, None], 3, axis=2)


def overlay_slice(slice_: np.ndarray, mask: np.ndarray, color=PRED_COLOR, alpha: float = 0.5) -> np.ndarray:
    """Blend ``color`` into the masked pixels only; others stay the plain gray render."""
    if slice_.shape != mask.shape:
        raise ValueError(f"slice shape {slice_.shape} != mask shape {mask.shape}")
    out = gray_to_bgr(slice_)
    sel = mask.astype(bool)
    if sel.any():
        blended = (1 - alpha) * out[sel].astype(np.float64) + alpha * np.asarray(color, dtype=np.float64)
        out[sel] = np.round(blended).astype(np.uint8)
    return out


def side_by_side(slice_: np.ndarray, pred: np.ndarray, gt: np.ndarray, gap: int = 4) -> np.ndarray:
    """[ground truth | prediction] panels separated by a white gap."""
    left = overlay_slice(slice_, gt, GT_COLOR)
    right = overlay_slice(slice_, pred, PRED_COLOR)
    sep = np.full((left.shape[0], gap, 3), 255, dtype=np.uint8)
    return np.concatenate([left, sep, right], axis=1)
