"""U-Net topology, seeded initialization and the versioned checkpoint format."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


MAGIC = b"OCTSEG01"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    encoder_depth: int = 5
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32, 16)
    residual_blocks: bool = False
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if self.encoder_depth < 1:
            raise ConfigurationError("encoder_depth must be >= 1")
        if len(self.encoder_channels) != self.encoder_depth:
            raise ConfigurationError(
                f"encoder_channels has {len(self.encoder_channels)} entries, "
                f"encoder_depth is {self.encoder_depth}"
            )
        if len(self.decoder_channels) != self.encoder_depth:
            raise ConfigurationError(
                f"decoder_channels has {len(self.decoder_channels)} entries, "
                f"encoder_depth is {self.encoder_depth}"
            )
        if self.out_channels != 1:
            raise ConfigurationError("out_channels is fixed to 1 (binary segmentation)")
        if self.in_channels < 1 or min(self.encoder_channels + self.decoder_channels) < 1:
            raise ConfigurationError("channel counts must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** self.encoder_depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ConvBlock(nn.Module):
    """Two 3x3 conv + batch-norm + ReLU layers, optionally with a residual path."""

    def __init__(self, cin: int, cout: int, residual: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.proj = None
        if residual:
            self.proj = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.proj is not None:
            y = y + self.proj(x)
        return F.relu(y)


class UNet(nn.Module):
    """Encoder stages: conv block, keep skip, 2x2 max-pool. The pooled map after
    the last stage is the bottleneck (1/2**depth resolution). Decoder stages:
    nearest 2x upsample, concatenate the matching skip, conv block.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = nn.ModuleList()
        cin = config.in_channels
        for c in config.encoder_channels:
            self.encoder.append(ConvBlock(cin, c, config.residual_blocks))
            cin = c
        self.decoder = nn.ModuleList()
        for skip, c in zip(reversed(config.encoder_channels), config.decoder_channels):
            self.decoder.append(ConvBlock(cin + skip, c, config.residual_blocks))
            cin = c
        self.head = nn.Conv2d(cin, config.out_channels, 1)

    def forward(self, x, return_bottleneck: bool = False):
        check_input_shape(x.shape, self.config)
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        bottleneck = x
        for block, skip in zip(self.decoder, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        logits = self.head(x)
        if return_bottleneck:
            return logits, bottleneck
        return logits


def check_input_shape(shape, config: ModelConfig) -> None:
    if len(shape) != 4:
        raise ValueError(f"expected B x C x h x w input, got shape {tuple(shape)}")
    _, c, h, w = shape
    if c != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels, got {c}")
    d = config.divisor
    if h % d or w % d:
        raise ValueError(
            f"input {h}x{w} is not divisible by {d}; U-Net inputs must be divisible by "
            f"2**encoder_depth (32 for depth 5), pad/crop them first"
        )


def init_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> UNet:
    """Build a U-Net with seeded He-normal conv weights and zero biases."""
    gen = torch.Generator().manual_seed(seed)
    model = UNet(config)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
    return model.to(dtype)


def count_parameters(config: ModelConfig) -> int:
    """Trainable scalars (conv weights/biases and batch-norm affine terms)."""
    def conv(k, cin, cout):
        return k * k * cin * cout + cout

    def block(cin, cout):
        n = conv(3, cin, cout) + conv(3, cout, cout) + 4 * cout
        if config.residual_blocks and cin != cout:
            n += conv(1, cin, cout)
        return n

    total = 0
    cin = config.in_channels
    for c in config.encoder_channels:
        total += block(cin, c)
        cin = c
    for skip, c in zip(reversed(config.encoder_channels), config.decoder_channels):
        total += block(cin + skip, c)
        cin = c
    return total + conv(1, cin, config.out_channels)


def forward(model: UNet, images, training: bool = False) -> torch.Tensor:
    """Logits for a B x C x h x w batch (numpy or tensor)."""
    x = torch.as_tensor(images, dtype=next(model.parameters()).dtype)
    model.train(training)
    with torch.set_grad_enabled(training):
        return model(x)


def predict_proba(model: UNet, images) -> torch.Tensor:
    return torch.sigmoid(forward(model, images, training=False))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, torch.Tensor]"
    epoch: int = 0
    val_loss: float = float("inf")
    loss_config_id: int = 0
    seed: int = 0
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: UNet, **meta) -> "Checkpoint":
        params = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
        return cls(config=model.config, params=params, **meta)

    def build_model(self, dtype=torch.float32) -> UNet:
        model = UNet(self.config)
        state = model.state_dict()
        if set(state) != set(self.params):
            raise CheckpointError(
                "checkpoint parameters do not match the config: "
                f"missing {sorted(set(state) - set(self.params))[:5]}, "
                f"unexpected {sorted(set(self.params) - set(state))[:5]}"
            )
        for name, ref in state.items():
            if tuple(ref.shape) != tuple(self.params[name].shape):
                raise CheckpointError(
                    f"{name}: shape {tuple(self.params[name].shape)} disagrees with config {tuple(ref.shape)}"
                )
        with torch.no_grad():
            for name, ref in state.items():
                ref.copy_(self.params[name])
        model.eval()
        return model.to(dtype)


def _header(c: Checkpoint) -> bytes:
    meta = {
        "config": c.config.to_dict(),
        "epoch": c.epoch,
        "val_loss": c.val_loss,
        "loss_config_id": c.loss_config_id,
        "seed": c.seed,
        "extra": c.extra,
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def checkpoint_bytes(c: Checkpoint) -> bytes:
    header = _header(c)
    parts = [MAGIC, struct.pack("<II", c.format_version, len(header)), header,
             struct.pack("<I", len(c.params))]
    for name, tensor in c.params.items():
        # ascontiguousarray would promote 0-d buffers (num_batches_tracked) to 1-d
        arr = np.asarray(tensor.detach().cpu().numpy(), dtype="<f4").copy(order="C")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        data = arr.tobytes()
        parts.append(struct.pack("<Q", len(data)) + data)
    return b"".join(parts)


def save_checkpoint(c: Checkpoint, path: str | Path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(checkpoint_bytes(c))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint (offset {self.pos}, need {n} bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not an OCTSEG checkpoint (bad magic)")
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version}, this build reads {FORMAT_VERSION}")
    try:
        meta = json.loads(r.take(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: {name}: byte length {nbytes} does not match shape {shape}")
        arr = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape)
        params[name] = torch.from_numpy(arr.copy())
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    ckpt = Checkpoint(
        config=config,
        params=params,
        epoch=int(meta["epoch"]),
        val_loss=float(meta["val_loss"]),
        loss_config_id=int(meta["loss_config_id"]),
        seed=int(meta["seed"]),
        format_version=version,
        extra=meta.get("extra", {}),
    )
    ckpt.build_model()  # validates names/shapes against the config
    return ckpt
