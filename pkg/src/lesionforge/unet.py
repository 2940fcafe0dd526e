"""Four-level U-Net for binary lesion segmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Module
from .tensor import Tensor

DESCRIPTOR_KIND = "unet-v1"


@dataclass
class UNetConfig:
    levels_down: int = 4
    levels_up: int = 4
    stride: int = 2
    base_channels: int = 16
    in_channels: int = 3
    batch_norm: bool = True
    pooling: str = "max"
    dropout_rate: float = 0.05
    activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if self.levels_down != self.levels_up:
            raise ValueError("levels_down and levels_up must match")
        if self.levels_down < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be >= 1")
        if self.stride != 2:
            raise ValueError("only stride-2 down/up sampling is supported")
        if self.pooling != "max":
            raise ValueError("only max pooling is supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @classmethod
    def paper_faithful(cls) -> "UNetConfig":
        return cls(base_channels=64)

    @classmethod
    def desk(cls, base_channels: int = 8) -> "UNetConfig":
        return cls(base_channels=base_channels)

    @property
    def levels(self) -> int:
        return self.levels_down

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(Module):
    """Two rounds of 3x3 conv -> batch norm -> activation."""

    def __init__(self, in_ch: int, out_ch: int, cfg: UNetConfig, rng: np.random.Generator):
        super().__init__()
        self.activation = cfg.activation
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, bias=not cfg.batch_norm)
        self.bn1 = BatchNorm2d(out_ch) if cfg.batch_norm else None
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, bias=not cfg.batch_norm)
        self.bn2 = BatchNorm2d(out_ch) if cfg.batch_norm else None

    def forward(self, x: Tensor) -> Tensor:
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2)):
            x = conv(x)
            if bn is not None:
                x = bn(x)
            x = ops.activation(self.activation, x)
        return x


class UNetModel(Module):
    def __init__(self, config: UNetConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(init_seed)
        base, levels = config.base_channels, config.levels
        self.encoders = []
        in_ch = config.in_channels
        for i in range(levels):
            block = ConvBlock(in_ch, base * 2**i, config, rng)
            self.add_module(f"enc{i}", block)
            self.encoders.append(block)
            in_ch = base * 2**i
        self.bottleneck = ConvBlock(in_ch, base * 2**levels, config, rng)
        self.bottleneck_drop = Dropout(config.dropout_rate, seed=[init_seed, 0])
        self.ups, self.decoders, self.dec_drops = [], [], []
        for i in reversed(range(levels)):
            ch = base * 2**i
            up = ConvTranspose2d(ch * 2, ch, 2, rng, stride=config.stride)
            drop = Dropout(config.dropout_rate, seed=[init_seed, i + 1])
            dec = ConvBlock(ch * 2, ch, config, rng)
            self.add_module(f"up{i}", up)
            self.add_module(f"drop{i}", drop)
            self.add_module(f"dec{i}", dec)
            self.ups.append(up)
            self.dec_drops.append(drop)
            self.decoders.append(dec)
        self.head = Conv2d(base, 1, 1, rng, padding=0, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return unet_forward(self, x)


def build_unet(config: UNetConfig, init_seed: int = 0) -> UNetModel:
    """Construct a U-Net with He-uniform weights drawn from ``init_seed``."""
    return UNetModel(config, init_seed)


def unet_forward(model: UNetModel, batch: Tensor, return_features: bool = False):
    """Run the U-Net on an N x C x H x W batch and return N x 1 x H x W probabilities.

    With ``return_features`` a second value maps ``enc{i}``, ``bottleneck`` and
    ``dec{i}`` to their activation shapes, for checking the shape ladder.
    """
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ValueError(f"expected N x {cfg.in_channels} x H x W input, got {batch.shape}")
    div = cfg.stride**cfg.levels
    if batch.shape[2] % div or batch.shape[3] % div:
        raise ValueError(f"spatial dims {batch.shape[2:]} must be divisible by {div}")
    shapes = {}
    skips = []
    x = batch
    for i, enc in enumerate(model.encoders):
        x = enc(x)
        shapes[f"enc{i}"] = x.shape
        skips.append(x)
        x = ops.max_pool2d(x, window=cfg.stride, stride=cfg.stride)
    x = model.bottleneck(x)
    shapes["bottleneck"] = x.shape
    x = model.bottleneck_drop(x)
    for level, up, drop, dec in zip(reversed(range(cfg.levels)), model.ups, model.dec_drops, model.decoders):
        x = ops.concat([skips[level], up(x)], axis=1)
        x = drop(x)
        x = dec(x)
        shapes[f"dec{level}"] = x.shape
    out = ops.activation(cfg.output_activation, model.head(x))
    return (out, shapes) if return_features else out


def binarize_mask(soft, threshold: float = 0.5) -> np.ndarray:
    """Threshold a soft mask; values >= threshold become 1."""
    data = soft.data if isinstance(soft, Tensor) else np.asarray(soft)
    return (data >= threshold).astype(data.dtype if data.dtype.kind == "f" else np.float32)
