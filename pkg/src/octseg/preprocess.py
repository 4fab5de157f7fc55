"""Deterministic pad/crop/normalize transforms shared by images and masks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DIVISOR = 32


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    target_width: int = 704
    crop_height: int = 352
    crop_width: int = 704
    crop_row_offset: int = 0
    pad_fill: float = 0.0
    normalize: str = "unit_range"  # or "none"

    def __post_init__(self):
        for name in ("crop_height", "crop_width"):
            value = getattr(self, name)
            if value <= 0 or value % DIVISOR:
                raise TransformError(
                    f"{name}={value} must be a positive multiple of {DIVISOR} "
                    "(U-Net input dims must be divisible by 32)"
                )
        if self.crop_width > self.target_width:
            raise TransformError(
                f"crop_width={self.crop_width} exceeds target_width={self.target_width}"
            )
        if self.crop_row_offset < 0:
            raise TransformError("crop_row_offset must be >= 0")
        if self.normalize not in ("unit_range", "none"):
            raise TransformError(f"unknown normalize mode {self.normalize!r}")

    @property
    def output_shape(self) -> tuple[int, int]:
        return self.crop_height, self.crop_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(**d)

    def check_input(self, height: int, width: int) -> None:
        """Raise if an ``height x width`` image cannot go through this transform."""
        if width > self.target_width:
            raise TransformError(
                f"width {width} exceeds target_width {self.target_width}; padding never truncates"
            )
        if self.crop_row_offset + self.crop_height > height:
            raise TransformError(
                f"height: crop rows [{self.crop_row_offset}, "
                f"{self.crop_row_offset + self.crop_height}) exceed input height {height}"
            )

    def column_mapping(self, width: int) -> tuple[int, int]:
        """(left pad, first kept column in padded coordinates) for input width."""
        pad_left = (self.target_width - width) // 2
        col_start = (self.target_width - self.crop_width) // 2
        return pad_left, col_start


def pad_width(image: np.ndarray, target_width: int, fill: float = 0.0) -> np.ndarray:
    """Center ``image`` horizontally in ``target_width`` columns.

    The extra columns split as floor on the left and ceil on the right.
    """
    h, w = image.shape[:2]
    if w > target_width:
        raise TransformError(f"width {w} exceeds target_width {target_width}")
    if w == target_width:
        return image
    left = (target_width - w) // 2
    out = np.full((h, target_width) + image.shape[2:], fill, dtype=image.dtype)
    out[:, left:left + w] = image
    return out


def crop_window(image: np.ndarray, height: int, width: int, row_offset: int = 0) -> np.ndarray:
    """Rows ``[row_offset, row_offset + height)`` and the centered ``width`` columns."""
    h, w = image.shape[:2]
    if row_offset < 0 or row_offset + height > h:
        raise TransformError(f"height: crop rows [{row_offset}, {row_offset + height}) exceed input height {h}")
    if width > w:
        raise TransformError(f"width: crop_width {width} exceeds input width {w}")
    c0 = (w - width) // 2
    return image[row_offset:row_offset + height, c0:c0 + width].copy()


def crop(image: np.ndarray, spec: TransformSpec) -> np.ndarray:
    return crop_window(image, spec.crop_height, spec.crop_width, spec.crop_row_offset)


def normalize(image: np.ndarray, mode: str = "unit_range") -> np.ndarray:
    """Scale integer codes by their max value; float input is clipped into [0, 1]."""
    if mode == "none":
        return image.astype(np.float32, copy=False)
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float32) / np.float32(np.iinfo(image.dtype).max)
    return np.clip(image, 0.0, 1.0).astype(np.float32, copy=False)


def apply_transform(
    image: np.ndarray, mask: np.ndarray | None, spec: TransformSpec
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply pad, crop and normalization to an image and (optionally) its mask."""
    if mask is not None and mask.shape != image.shape:
        raise TransformError(f"image shape {image.shape} != mask shape {mask.shape}")
    out_img = normalize(crop(pad_width(image, spec.target_width, spec.pad_fill), spec), spec.normalize)
    out_mask = None
    if mask is not None:
        out_mask = crop(pad_width((mask > 0).astype(np.uint8), spec.target_width, 0), spec)
    return out_img, out_mask


def restore_geometry(pred: np.ndarray, height: int, width: int, spec: TransformSpec) -> np.ndarray:
    """Map an ``h x w`` transformed-space mask back onto the native ``height x width`` grid.

    Pixels outside the crop window are 0.
    """
    if pred.shape != spec.output_shape:
        raise TransformError(f"prediction shape {pred.shape} != transform output {spec.output_shape}")
    spec.check_input(height, width)
    pad_left, col_start = spec.column_mapping(width)
    canvas = np.zeros((height, spec.target_width), dtype=pred.dtype)
    r0 = spec.crop_row_offset
    canvas[r0:r0 + spec.crop_height, col_start:col_start + spec.crop_width] = pred
    return canvas[:, pad_left:pad_left + width]
