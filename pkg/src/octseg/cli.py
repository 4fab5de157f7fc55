"""Command line entry point: synth | train | eval | predict | overlay | bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import cv2
import numpy as np

from . import data as D
from .evaluate import benchmark_inference, evaluate_set, format_table, predict_volume
from .losses import loss_preset
from .model import Checkpoint, ModelConfig, load_checkpoint
from .overlay import overlay_slice, side_by_side
from .preprocess import TransformSpec, restore_geometry
from .train import TrainConfig, fit

log = logging.getLogger("octseg")

# per-slice inference time reported for the original 1024 x 700 x 700 volumes (A100 GPU)
REFERENCE_SECONDS_PER_SLICE = 0.027
REFERENCE_SECONDS_PER_VOLUME = 18.98


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration


DEFAULT_RUN = {
    "data_root": None,
    "split": {"counts": [21, 6, 3], "seed": 0},
    "transform": TransformSpec().to_dict(),
    "model": ModelConfig().to_dict(),
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "loss"},
    "loss": 4,
    "dice_smooth": 1.0,
    "bit_depth": 8,
    "out_dir": None,
    "weights": None,
}


def _deep_update(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def resolve_run_config(args) -> dict:
    """Defaults < --config JSON < flags."""
    cfg = json.loads(json.dumps(DEFAULT_RUN))
    if getattr(args, "config", None):
        cfg = _deep_update(cfg, json.loads(Path(args.config).read_text()))
    flag_map = {
        "data": ("data_root",),
        "out": ("out_dir",),
        "loss": ("loss",),
        "weights": ("weights",),
        "bit_depth": ("bit_depth",),
        "seed": ("train", "seed"),
        "threshold": ("train", "threshold"),
        "max_epochs": ("train", "max_epochs"),
        "batch_size": ("train", "batch_size"),
        "lr": ("train", "learning_rate"),
        "patience": ("train", "patience"),
        "target_width": ("transform", "target_width"),
        "crop_height": ("transform", "crop_height"),
        "crop_width": ("transform", "crop_width"),
        "crop_row_offset": ("transform", "crop_row_offset"),
        "encoder_channels": ("model", "encoder_channels"),
        "decoder_channels": ("model", "decoder_channels"),
    }
    for flag, keys in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    if getattr(args, "encoder_channels", None) is not None:
        cfg["model"]["encoder_depth"] = len(args.encoder_channels)
    if getattr(args, "residual", False):
        cfg["model"]["residual_blocks"] = True
    if getattr(args, "split", None):
        cfg["split"] = args.split
    if getattr(args, "split_counts", None):
        cfg["split"] = {"counts": list(args.split_counts),
                        "seed": args.split_seed if args.split_seed is not None else 0}
    return cfg


def build_objects(cfg: dict):
    transform = TransformSpec.from_dict(cfg["transform"])
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig(loss=loss_preset(cfg["loss"], cfg.get("dice_smooth", 1.0)), **cfg["train"])
    return transform, model_cfg, train_cfg


def resolve_split(cfg: dict, root: Path) -> D.DatasetSplit:
    split = cfg["split"]
    if isinstance(split, str):
        path = Path(split)
        if not path.is_absolute() and not path.exists():
            path = root / split
        if not path.exists():
            raise CLIError(f"split file {split} not found")
        return D.DatasetSplit.from_json(path)
    ids = D.list_volume_ids(root)
    return D.split_dataset(ids, tuple(split["counts"]), split.get("seed", 0))


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"{what} is required")
    path = Path(path)
    if not path.is_dir():
        raise CLIError(f"{what} {path} does not exist")
    return path


def _transform_for(ckpt: Checkpoint, args) -> TransformSpec:
    d = dict(ckpt.extra.get("transform", TransformSpec().to_dict()))
    for flag in ("target_width", "crop_height", "crop_width", "crop_row_offset"):
        if getattr(args, flag, None) is not None:
            d[flag] = getattr(args, flag)
    return TransformSpec.from_dict(d)


def _load_ckpt(args) -> Checkpoint:
    path = args.checkpoint or args.weights
    if not path:
        raise CLIError("--checkpoint is required")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CLIError(f"{out} exists and is not empty (use --force)")
    inc = args.inclusions if len(args.inclusions) == 2 else args.inclusions * 2
    spec = D.SyntheticSpec(
        n_volumes=args.volumes,
        slices_per_volume=args.slices,
        height=args.height,
        width=args.width,
        inclusions_per_volume=tuple(inc),
        inclusion_radius=tuple(args.radius),
        inclusion_intensity=tuple(args.intensity),
        background_noise_std=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    pairs = D.generate_synthetic(spec)
    annotations = D.write_dataset(out, pairs)
    (out / "synth-spec.json").write_text(json.dumps(asdict(spec), indent=2))
    n_slices = sum(len(v) for v, _ in pairs)
    n_pos = sum(int(m.labels.sum()) for _, m in pairs)
    print(f"wrote {len(pairs)} volumes, {n_slices} slices (+{n_slices} masks), "
          f"{len(annotations)} inclusion boxes, {n_pos} positive voxels to {out}")
    return 0


def _train_one(cfg: dict, out_dir: Path) -> tuple[Checkpoint, list[dict], D.DatasetSplit, list]:
    root = _require_dir(cfg["data_root"], "--data")
    transform, model_cfg, train_cfg = build_objects(cfg)
    split = resolve_split(cfg, root)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved-config.json").write_text(json.dumps(cfg, indent=2))
    split.to_json(out_dir / "split.json")
    ids = split.train_ids + split.val_ids
    pairs = D.load_dataset(root, ids, cfg["bit_depth"])
    initial = load_checkpoint(cfg["weights"]) if cfg.get("weights") else None
    ckpt, history = fit(pairs, split, transform, model_cfg, train_cfg, out_dir, initial=initial)
    best = min(history, key=lambda r: r["val_loss"])
    print(f"loss {train_cfg.loss.id} ({train_cfg.loss.label}): {len(history)} epochs, "
          f"best epoch {ckpt.epoch} val_loss {ckpt.val_loss:.5f} val dsc {best['dsc']:.3f} "
          f"-> {out_dir / 'best.ckpt'}")
    return ckpt, history, split, pairs


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    if cfg["out_dir"] is None:
        raise CLIError("--out is required")
    if cfg["loss"] not in range(1, 6):
        raise CLIError(f"--loss must be 1..5, got {cfg['loss']}")
    out = Path(cfg["out_dir"])
    if not args.train_all:
        _train_one(cfg, out)
        return 0

    root = _require_dir(cfg["data_root"], "--data")
    val_rows, test_rows = [], []
    for loss_id in range(1, 6):
        run = dict(cfg, loss=loss_id, out_dir=str(out / f"loss{loss_id}"))
        ckpt, _, split, pairs = _train_one(run, out / f"loss{loss_id}")
        transform = TransformSpec.from_dict(run["transform"])
        by_id = {v.id: (v, m) for v, m in pairs}
        val_rep = evaluate_set(ckpt, [by_id[i] for i in split.val_ids], transform,
                               run["train"]["threshold"], str(out / f"loss{loss_id}" / "best.ckpt"))
        test_pairs = D.load_dataset(root, split.test_ids, run["bit_depth"])
        test_rep = evaluate_set(ckpt, test_pairs, transform, run["train"]["threshold"],
                                str(out / f"loss{loss_id}" / "best.ckpt"))
        test_rep.save(out / f"loss{loss_id}" / "metrics.json")
        val_rows.append((loss_id, val_rep))
        test_rows.append((loss_id, test_rep))
    summary = {
        "validation": {i: {"dsc": r.mean_dsc, "precision": r.mean_precision, "recall": r.mean_recall}
                       for i, r in val_rows},
        "test": {i: {"dsc": r.mean_dsc, "precision": r.mean_precision, "recall": r.mean_recall,
                     "seconds_per_volume": float(np.mean([v.seconds_total for v in r.per_volume]))}
                 for i, r in test_rows},
    }
    (out / "comparison.json").write_text(json.dumps(summary, indent=2))
    print("\nvalidation set")
    print(format_table(val_rows))
    print("\ntest set")
    print(format_table(test_rows, with_time=True))
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args)
    root = _require_dir(args.data, "--data")
    transform = _transform_for(ckpt, args)
    if args.split:
        split_path = Path(args.split)
        split = D.DatasetSplit.from_json(split_path if split_path.exists() else root / args.split)
        ids = split.section(args.section)
    else:
        ids = D.list_volume_ids(root)
    if not ids:
        raise CLIError("no volumes selected for evaluation")
    pairs = D.load_dataset(root, ids, args.bit_depth or 8)
    threshold = 0.5 if args.threshold is None else args.threshold
    report = evaluate_set(ckpt, pairs, transform, threshold, str(args.checkpoint or args.weights))
    out = Path(args.out) if args.out else Path(args.checkpoint or args.weights).parent
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "metrics.json")
    for v in report.per_volume:
        print(f"{v.volume_id}: dsc {v.dsc:.4f} precision {v.precision:.4f} recall {v.recall:.4f} "
              f"{v.seconds_total:.3f}s ({v.seconds_per_slice * 1000:.1f} ms/slice)")
    print(format_table([(report.loss_config_id, report)], with_time=True))
    print(f"wrote {out / 'metrics.json'}")
    return 0


def cmd_predict(args) -> int:
    ckpt = _load_ckpt(args)
    vdir = _require_dir(args.volume, "--volume")
    transform = _transform_for(ckpt, args)
    volume = D.load_volume(vdir, args.bit_depth or 8)
    threshold = 0.5 if args.threshold is None else args.threshold
    preds, _ = predict_volume(ckpt.build_model(), volume, transform, threshold)
    names = [p.name for p in D._sorted_pngs(vdir)]
    native = np.stack([
        restore_geometry(p, volume.native_height, volume.native_width, transform) for p in preds
    ])
    out = Path(args.out)
    D.write_png_stack(out, native * np.uint8(255), names)
    print(f"wrote {len(names)} prediction masks ({int(native.sum())} positive pixels) to {out}")
    return 0


def cmd_overlay(args) -> int:
    vdir = _require_dir(args.volume, "--volume")
    volume = D.load_volume(vdir, args.bit_depth or 8)
    pred = D.load_mask_volume(_require_dir(args.mask, "--mask"), volume.id)
    if pred.shape != volume.shape:
        raise CLIError(f"mask shape {pred.shape} does not match volume {volume.shape}")
    gt = None
    if args.gt:
        gt = D.load_mask_volume(_require_dir(args.gt, "--gt"), volume.id)
        if gt.shape != volume.shape:
            raise CLIError(f"ground-truth shape {gt.shape} does not match volume {volume.shape}")
    names = [p.name for p in D._sorted_pngs(vdir)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, name in enumerate(names):
        if gt is None:
            img = overlay_slice(volume.slices[s], pred.labels[s])
        else:
            img = side_by_side(volume.slices[s], pred.labels[s], gt.labels[s])
        cv2.imwrite(str(out / name), img)
    print(f"wrote {len(names)} overlays to {out}")
    return 0


def cmd_bench(args) -> int:
    ckpt = _load_ckpt(args)
    vdir = _require_dir(args.volume, "--volume")
    transform = _transform_for(ckpt, args)
    volume = D.load_volume(vdir, args.bit_depth or 8)
    result = benchmark_inference(ckpt, volume, transform, args.repeats,
                                 0.5 if args.threshold is None else args.threshold)
    result["timing_scope"] = "preprocess + forward + threshold; excludes disk I/O and checkpoint load"
    result["reference"] = {
        "note": "published GPU timings on 1024x700x700 volumes, context only",
        "seconds_per_slice": REFERENCE_SECONDS_PER_SLICE,
        "seconds_per_volume": REFERENCE_SECONDS_PER_VOLUME,
    }
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(result, indent=2))
    st, sp = result["seconds_total"], result["seconds_per_slice"]
    print(f"{result['slices']} slices x {args.repeats} repeats on {result['host']}")
    print(f"seconds_total     min {st['min']:.4f} mean {st['mean']:.4f} max {st['max']:.4f}")
    print(f"seconds_per_slice min {sp['min']:.5f} mean {sp['mean']:.5f} max {sp['max']:.5f}")
    print(f"(reference, not comparable hardware: {REFERENCE_SECONDS_PER_SLICE} s/slice)")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--loss", type=int, choices=range(1, 6), help="loss preset 1..5")
    p.add_argument("--threshold", type=float, help="probability threshold (default 0.5)")
    p.add_argument("--weights", help="external checkpoint (initial weights for train)")
    p.add_argument("--bit-depth", type=int, choices=(8, 16))


def _transform_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--target-width", type=int)
    p.add_argument("--crop-height", type=int)
    p.add_argument("--crop-width", type=int)
    p.add_argument("--crop-row-offset", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--volumes", type=int, default=8)
    p.add_argument("--slices", type=int, default=16)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--inclusions", type=int, nargs="+", default=[1, 3], metavar="N",
                   help="count or MIN MAX per volume")
    p.add_argument("--radius", type=float, nargs=2, default=[3.0, 7.0])
    p.add_argument("--intensity", type=float, nargs=2, default=[0.6, 0.95])
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a U-Net")
    _common(p)
    p.add_argument("--config", help="JSON run config; flags override it")
    _transform_flags(p)
    p.add_argument("--data")
    p.add_argument("--split", help="split JSON file")
    p.add_argument("--split-counts", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--split-seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--encoder-channels", type=int, nargs="+")
    p.add_argument("--decoder-channels", type=int, nargs="+")
    p.add_argument("--residual", action="store_true")
    p.add_argument("--train-all", action="store_true", help="run loss presets 1-5 and compare")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-volume metrics for a split section")
    _common(p)
    _transform_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--section", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write binary prediction PNGs")
    _common(p)
    _transform_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--volume", help="directory of slice PNGs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("overlay", help="render masks over slices")
    _common(p)
    p.add_argument("--volume", help="directory of slice PNGs")
    p.add_argument("--mask", help="prediction (or any) mask PNG directory")
    p.add_argument("--gt", help="optional ground-truth masks for a side-by-side panel")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("bench", help="time inference over one volume")
    _common(p)
    _transform_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--volume", help="directory of slice PNGs")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command in ("predict", "overlay") and not args.out:
        print("octseg: error: --out is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"octseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
