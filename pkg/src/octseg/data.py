"""Volume/mask loading, annotations, splits, synthetic volumes and batching."""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np

from .preprocess import DIVISOR, TransformSpec, apply_transform


class DataError(ValueError):
    """Base class for dataset problems."""


class ShapeMismatchError(DataError):
    pass


class OrderingError(DataError):
    pass


class DecodeError(DataError):
    pass


class AnnotationError(DataError):
    pass


class ConfigurationError(ValueError):
    pass


_NUMERIC_STEM = re.compile(r"^\d+$")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    id: str
    slices: np.ndarray  # float32 [S, H, W] in [0, 1]
    native_height: int = 0
    native_width: int = 0

    def __post_init__(self):
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise ShapeMismatchError(f"volume {self.id}: expected S x H x W, got {self.slices.shape}")
        if not self.native_height:
            object.__setattr__(self, "native_height", int(self.slices.shape[1]))
        if not self.native_width:
            object.__setattr__(self, "native_width", int(self.slices.shape[2]))
        _frozen(self.slices)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.slices.shape)

    def __len__(self) -> int:
        return self.slices.shape[0]


@dataclass(frozen=True)
class MaskVolume:
    volume_id: str
    labels: np.ndarray  # uint8 [S, H, W] in {0, 1}

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ShapeMismatchError(f"mask {self.volume_id}: expected S x H x W, got {self.labels.shape}")
        if self.labels.dtype != np.uint8 or self.labels.max(initial=0) > 1:
            raise DataError(f"mask {self.volume_id}: labels must be uint8 0/1")
        _frozen(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class BoxAnnotation:
    volume_id: str
    slice_start: int
    slice_end: int
    x: int
    y: int
    w: int
    h: int
    cls: str = "inclusion"

    def validate(self, shape: tuple[int, int, int] | None = None) -> None:
        if self.cls != "inclusion":
            raise AnnotationError(f"{self.volume_id}: unsupported class {self.cls!r}")
        if not 0 <= self.slice_start < self.slice_end:
            raise AnnotationError(
                f"{self.volume_id}: bad slice range [{self.slice_start}, {self.slice_end})"
            )
        if self.x < 0 or self.y < 0 or self.w <= 0 or self.h <= 0:
            raise AnnotationError(f"{self.volume_id}: bad box ({self.x},{self.y},{self.w},{self.h})")
        if shape is not None:
            S, H, W = shape
            if self.slice_end > S:
                raise AnnotationError(f"{self.volume_id}: slice_end {self.slice_end} > {S} slices")
            if self.x + self.w > W or self.y + self.h > H:
                raise AnnotationError(
                    f"{self.volume_id}: box ({self.x},{self.y},{self.w},{self.h}) "
                    f"outside {H}x{W} slice"
                )

    def to_record(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls")
        return d


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]

    def section(self, name: str) -> list[str]:
        try:
            return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[name]
        except KeyError:
            raise ConfigurationError(f"unknown split section {name!r}") from None

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}, indent=2)
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "DatasetSplit":
        d = json.loads(Path(path).read_text())
        split = cls(list(d["train"]), list(d["val"]), list(d["test"]))
        all_ids = split.train_ids + split.val_ids + split.test_ids
        if len(set(all_ids)) != len(all_ids):
            raise ConfigurationError(f"{path}: split sections overlap")
        return split


@dataclass(frozen=True)
class SyntheticSpec:
    n_volumes: int = 12
    slices_per_volume: int = 16
    height: int = 96
    width: int = 192
    inclusions_per_volume: tuple[int, int] = (1, 3)
    inclusion_radius: tuple[float, float] = (3.0, 7.0)
    inclusion_intensity: tuple[float, float] = (0.6, 0.95)
    background_noise_std: float = 0.04
    background_level: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("inclusions_per_volume", "inclusion_radius", "inclusion_intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: min {lo} > max {hi}")
        if self.inclusions_per_volume[0] < 0 or self.inclusion_radius[0] <= 0:
            raise ConfigurationError("inclusion counts must be >= 0 and radii > 0")
        if not (0.0 <= self.inclusion_intensity[0] and self.inclusion_intensity[1] <= 1.0):
            raise ConfigurationError("inclusion_intensity must lie in [0, 1]")
        if self.inclusion_intensity[0] <= self.background_level:
            raise ConfigurationError(
                "inclusion_intensity lower bound must exceed the background level "
                f"({self.inclusion_intensity[0]} <= {self.background_level})"
            )
        if min(self.n_volumes, self.slices_per_volume, self.height, self.width) < 1:
            raise ConfigurationError("volume dimensions must be positive")
        if self.background_noise_std < 0:
            raise ConfigurationError("background_noise_std must be >= 0")


@dataclass(frozen=True)
class Batch:
    images: np.ndarray  # float32 [B, C, h, w]
    masks: np.ndarray  # float32 [B, 1, h, w], 0/1
    source: list[tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# PNG stacks


def _sorted_pngs(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir() if p.suffix.lower() == ".png"]
    for p in files:
        if not _NUMERIC_STEM.match(p.stem):
            raise OrderingError(f"{p}: slice filenames must be numeric (e.g. 0001.png)")
    return sorted(files, key=lambda p: int(p.stem))


def _read_gray(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DecodeError(f"cannot decode PNG {path}")
    if img.ndim == 3:
        # colour PNGs of gray data: take a single channel
        img = img[..., 0]
    return img


def _read_stack(directory: Path, workers: int = 4) -> tuple[list[Path], np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    files = _sorted_pngs(directory)
    if not files:
        raise DataError(f"{directory}: no PNG slices found")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        images = list(pool.map(_read_gray, files))
    first = images[0].shape
    for p, img in zip(files, images):
        if img.shape != first:
            raise ShapeMismatchError(f"{p}: shape {img.shape} differs from {files[0].name} {first}")
    return files, np.stack(images)


def load_volume(directory: str | Path, bit_depth: int = 8, volume_id: str | None = None) -> Volume:
    """Read a directory of numbered gray PNG slices into a Volume."""
    if bit_depth not in (8, 16):
        raise ConfigurationError(f"bit_depth must be 8 or 16, got {bit_depth}")
    directory = Path(directory)
    _, stack = _read_stack(directory)
    scale = 255.0 if bit_depth == 8 else 65535.0
    slices = np.clip(stack.astype(np.float32) / np.float32(scale), 0.0, 1.0)
    if volume_id is None:
        volume_id = directory.parent.name if directory.name == "slices" else directory.name
    return Volume(volume_id, slices, int(stack.shape[1]), int(stack.shape[2]))


def load_mask_volume(directory: str | Path, volume_id: str) -> MaskVolume:
    _, stack = _read_stack(Path(directory))
    return MaskVolume(volume_id, (stack > (np.iinfo(stack.dtype).max // 2)).astype(np.uint8))


def write_png_stack(directory: str | Path, stack: np.ndarray, names: Sequence[str] | None = None) -> None:
    """Write uint8/uint16 [S, H, W] as NNNN.png (or the given filenames)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(stack):
        name = names[i] if names is not None else f"{i:04d}.png"
        if not cv2.imwrite(str(directory / name), img):
            raise OSError(f"failed to write {directory / name}")


def volume_to_uint8(volume: Volume) -> np.ndarray:
    return np.round(volume.slices * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# annotations


_ANNOTATION_KEYS = ("volume_id", "slice_start", "slice_end", "x", "y", "w", "h")


def parse_annotations(records: list, shapes: dict[str, tuple[int, int, int]] | None = None) -> list[BoxAnnotation]:
    if not isinstance(records, list):
        raise AnnotationError("annotation file must hold a JSON list of records")
    out = []
    for i, rec in enumerate(records):
        try:
            if not isinstance(rec, dict):
                raise TypeError("record is not an object")
            missing = [k for k in _ANNOTATION_KEYS if k not in rec]
            if missing:
                raise KeyError(f"missing keys {missing}")
            ints = {}
            for k in _ANNOTATION_KEYS[1:]:
                v = rec[k]
                if isinstance(v, bool) or not isinstance(v, int):
                    raise TypeError(f"{k} must be an integer, got {v!r}")
                ints[k] = v
            box = BoxAnnotation(str(rec["volume_id"]), cls=rec.get("class", "inclusion"), **ints)
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"annotation record {i}: {exc}") from None
        try:
            box.validate(shapes.get(box.volume_id) if shapes else None)
        except AnnotationError as exc:
            raise AnnotationError(f"annotation record {i}: {exc}") from None
        out.append(box)
    return out


def load_annotations(path: str | Path, shapes: dict[str, tuple[int, int, int]] | None = None) -> list[BoxAnnotation]:
    """Parse ``annotations.json``; boxes are checked against ``shapes`` when given."""
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return parse_annotations(records, shapes)


def save_annotations(path: str | Path, annotations: Sequence[BoxAnnotation]) -> None:
    Path(path).write_text(json.dumps([a.to_record() for a in annotations], indent=1))


def rasterize_boxes(annotations: Sequence[BoxAnnotation], shape: tuple[int, int, int], volume_id: str = "") -> MaskVolume:
    labels = np.zeros(shape, dtype=np.uint8)
    for box in annotations:
        box.validate(shape)
        labels[box.slice_start:box.slice_end, box.y:box.y + box.h, box.x:box.x + box.w] = 1
    if not volume_id and annotations:
        volume_id = annotations[0].volume_id
    return MaskVolume(volume_id, labels)


def boxes_from_mask(labels: np.ndarray) -> list[tuple[int, int, int, int, int, int]]:
    """Tight (slice_start, slice_end, x, y, w, h) of each 3-D connected component."""
    from scipy import ndimage

    lab, _ = ndimage.label(labels, structure=np.ones((3, 3, 3)))
    out = []
    for sl in ndimage.find_objects(lab):
        z, y, x = sl
        out.append((z.start, z.stop, x.start, y.start, x.stop - x.start, y.stop - y.start))
    return out


# ---------------------------------------------------------------------------
# datasets on disk


def list_volume_ids(root: str | Path) -> list[str]:
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if (p / "slices").is_dir())


def load_pair(root: str | Path, volume_id: str, bit_depth: int = 8,
              annotations: Sequence[BoxAnnotation] | None = None) -> tuple[Volume, MaskVolume]:
    """Load a volume and its mask; a mask PNG stack wins over rasterized boxes."""
    vdir = Path(root) / volume_id
    volume = load_volume(vdir / "slices", bit_depth, volume_id=volume_id)
    if (vdir / "masks").is_dir():
        mask = load_mask_volume(vdir / "masks", volume_id)
        if mask.shape != volume.shape:
            raise ShapeMismatchError(f"{volume_id}: mask shape {mask.shape} != volume {volume.shape}")
    elif annotations is not None:
        boxes = [a for a in annotations if a.volume_id == volume_id]
        mask = rasterize_boxes(boxes, volume.shape, volume_id)
    else:
        raise DataError(f"{volume_id}: no masks/ directory and no annotations")
    return volume, mask


def load_dataset(root: str | Path, ids: Sequence[str], bit_depth: int = 8) -> list[tuple[Volume, MaskVolume]]:
    root = Path(root)
    ann_path = root / "annotations.json"
    annotations = load_annotations(ann_path) if ann_path.exists() else None
    missing = [
        v for v in ids
        if not (root / v / "masks").is_dir()
        and not (annotations is not None and (root / v / "slices").is_dir())
    ]
    if missing:
        raise DataError(f"missing masks/annotations for volumes: {', '.join(missing)}")
    return [load_pair(root, v, bit_depth, annotations) for v in ids]


# ---------------------------------------------------------------------------
# splits


def split_dataset(ids: Sequence[str], counts: tuple[int, int, int] = (21, 6, 3), seed: int = 0) -> DatasetSplit:
    """Shuffle whole-volume ids with ``seed`` and cut into train/val/test."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ConfigurationError("volume ids must be unique")
    n_train, n_val, n_test = counts
    if min(counts) < 0 or n_train + n_val + n_test != len(ids):
        raise ConfigurationError(f"split counts {tuple(counts)} do not sum to {len(ids)} volumes")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
    )


# ---------------------------------------------------------------------------
# synthetic volumes


def _background(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Smooth dark slab: air above an undulating surface, decaying signal below.

    Returns the [H, W] background and the surface row per column.
    """
    H, W = spec.height, spec.width
    cols = np.arange(W, dtype=np.float64)
    base = H * rng.uniform(0.12, 0.2)
    amp = H * rng.uniform(0.0, 0.04)
    phase = rng.uniform(0, 2 * np.pi)
    surface = base + amp * np.sin(2 * np.pi * cols / W + phase)
    rows = np.arange(H, dtype=np.float64)[:, None]
    depth = rows - surface[None, :]
    decay = H * rng.uniform(0.5, 0.9)
    slab = spec.background_level * np.exp(-np.clip(depth, 0, None) / decay)
    edge = 0.5 * (1 + np.tanh(depth / 1.5))
    bg = 0.02 + (slab - 0.02) * edge
    return bg, surface


def _place_blobs(rng, spec: SyntheticSpec, k: int, surface_max: float):
    S, H, W = spec.slices_per_volume, spec.height, spec.width
    rmin, rmax = spec.inclusion_radius
    blobs = []
    taken: list[tuple[np.ndarray, np.ndarray]] = []
    attempts = 0
    while len(blobs) < k:
        attempts += 1
        if attempts > 1000 * max(k, 1):
            raise ConfigurationError(
                f"cannot place {k} separated inclusions in a {S}x{H}x{W} volume; "
                "reduce inclusions_per_volume or inclusion_radius"
            )
        ry, rx = rng.uniform(rmin, rmax, size=2)
        rz = rng.uniform(min(rmin, S / 2), min(rmax, S / 2)) if S > 1 else 0.5
        rz = max(rz, 0.5)
        lo_y = surface_max + ry + 2
        hi_y = H - ry - 2
        if lo_y >= hi_y or 2 * rx + 4 >= W:
            continue
        c = np.array([
            rng.integers(0, S),
            rng.uniform(lo_y, hi_y),
            rng.uniform(rx + 2, W - rx - 2),
        ])
        c[1:] = np.round(c[1:])
        r = np.array([rz, ry, rx])
        # mask support is the ellipsoid d <= 1; keep boxes 2 voxels apart
        lo, hi = c - r - 2, c + r + 2
        if any(np.all(lo <= h2) and np.all(l2 <= hi) for l2, h2 in taken):
            continue
        taken.append((c - r, c + r))
        blobs.append((c, r, rng.uniform(*spec.inclusion_intensity)))
    return blobs


def synthesize_volume(spec: SyntheticSpec, index: int, rng: np.random.Generator) -> tuple[Volume, MaskVolume]:
    S, H, W = spec.slices_per_volume, spec.height, spec.width
    bg, surface = _background(rng, spec)
    k = int(rng.integers(spec.inclusions_per_volume[0], spec.inclusions_per_volume[1] + 1))
    blobs = _place_blobs(rng, spec, k, float(surface.max()))

    z, y, x = np.meshgrid(np.arange(S), np.arange(H), np.arange(W), indexing="ij")
    clean = np.broadcast_to(bg, (S, H, W)).copy()
    labels = np.zeros((S, H, W), dtype=np.uint8)
    for c, r, amp in blobs:
        d2 = ((z - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((x - c[2]) / r[2]) ** 2
        # super-Gaussian profile, 0.5 at d = 1; rendered flat-topped at amp inside the
        # half-peak support with a ~1 px shoulder outside it
        profile = np.exp(-np.log(2.0) * d2 ** 4)
        support = profile >= 0.5
        labels |= support.astype(np.uint8)
        clean = np.maximum(clean, amp * np.minimum(1.0, 2.0 * profile))
    noise = rng.normal(0.0, spec.background_noise_std, size=clean.shape) if spec.background_noise_std else 0.0
    slices = np.clip(clean + noise, 0.0, 1.0).astype(np.float32)
    vid = f"vol{index:03d}"
    return Volume(vid, slices), MaskVolume(vid, labels)


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[Volume, MaskVolume]]:
    """Seeded stand-in OCT volumes with bright ellipsoidal inclusions."""
    root = np.random.SeedSequence(spec.seed)
    return [
        synthesize_volume(spec, i, np.random.default_rng(child))
        for i, child in enumerate(root.spawn(spec.n_volumes))
    ]


def write_dataset(root: str | Path, pairs: Sequence[tuple[Volume, MaskVolume]]) -> list[BoxAnnotation]:
    """Write the canonical layout plus box annotations derived from the masks."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    annotations = []
    for volume, mask in pairs:
        write_png_stack(root / volume.id / "slices", volume_to_uint8(volume))
        write_png_stack(root / volume.id / "masks", mask.labels * np.uint8(255))
        for s0, s1, x, y, w, h in boxes_from_mask(mask.labels):
            annotations.append(BoxAnnotation(volume.id, s0, s1, x, y, w, h))
    save_annotations(root / "annotations.json", annotations)
    return annotations


# ---------------------------------------------------------------------------
# batching


def iterate_batches(
    pairs: Sequence[tuple[Volume, MaskVolume]],
    transform: TransformSpec,
    batch_size: int = 16,
    shuffle: bool = False,
    seed: int = 0,
    channels: int = 1,
) -> Iterator[Batch]:
    """Yield transformed slices in batches; every slice appears exactly once."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    h, w = transform.output_shape
    if h % DIVISOR or w % DIVISOR:
        raise ConfigurationError(f"transform output {h}x{w} not divisible by {DIVISOR}")
    index = [(vi, s) for vi, (vol, _) in enumerate(pairs) for s in range(len(vol))]
    for vol, mask in pairs:
        if vol.shape != mask.shape:
            raise ShapeMismatchError(f"{vol.id}: volume {vol.shape} vs mask {mask.shape}")
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(index))
        index = [index[i] for i in order]
    for start in range(0, len(index), batch_size):
        chunk = index[start:start + batch_size]
        images = np.empty((len(chunk), channels, h, w), dtype=np.float32)
        masks = np.empty((len(chunk), 1, h, w), dtype=np.float32)
        source = []
        for b, (vi, s) in enumerate(chunk):
            vol, mask = pairs[vi]
            img, m = apply_transform(vol.slices[s], mask.labels[s], transform)
            images[b] = img[None]
            masks[b, 0] = m
            source.append((vol.id, s))
        yield Batch(images, masks, source)
