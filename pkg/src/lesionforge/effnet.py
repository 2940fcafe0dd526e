"""EfficientNet-B0 classifier with a single sigmoid output.

The stage table, squeeze-excitation ratio, stem/head widths and the compound
scaling constants are the published B0 values. Widths and depths for other
scaling coefficients come from :func:`stage_table`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Dense, DepthwiseConv2d, Dropout, Module
from .tensor import Tensor

DESCRIPTOR_KIND = "effnet-b0-v1"

B0_STEM = 32
B0_HEAD = 1280
DESK_DIVISOR = 4


@dataclass(frozen=True)
class StageSpec:
    expand: int
    kernel: int
    stride: int
    in_ch: int
    out_ch: int
    repeats: int


B0_STAGES = (
    StageSpec(1, 3, 1, 32, 16, 1),
    StageSpec(6, 3, 2, 16, 24, 2),
    StageSpec(6, 5, 2, 24, 40, 2),
    StageSpec(6, 3, 2, 40, 80, 3),
    StageSpec(6, 5, 1, 80, 112, 3),
    StageSpec(6, 5, 2, 112, 192, 4),
    StageSpec(6, 3, 1, 192, 320, 1),
)


def compound_scale(phi: float, alpha: float = 1.2, beta: float = 1.1, gamma: float = 1.15) -> tuple:
    """Return ``(depth_mult, width_mult, resolution_mult) = (alpha**phi, beta**phi, gamma**phi)``."""
    if min(alpha, beta, gamma) <= 0:
        raise ValueError("scaling constants must be positive")
    return alpha**phi, beta**phi, gamma**phi


def round_filters(channels: int, width_mult: float, divisor: int = 8) -> int:
    if width_mult == 1.0:
        return channels
    scaled = channels * width_mult
    new = max(divisor, int(scaled + divisor / 2) // divisor * divisor)
    if new < 0.9 * scaled:
        new += divisor
    return int(new)


def round_repeats(repeats: int, depth_mult: float) -> int:
    return int(math.ceil(depth_mult * repeats))


@dataclass
class EffNetConfig:
    phi: float = 0.0
    alpha: float = 1.2
    beta: float = 1.1
    gamma: float = 1.15
    resolution: int = 256
    in_channels: int = 3
    dropout_rate: float = 0.1
    se_ratio: float = 0.25
    l2_lambda: float = 1e-4
    desk_scale: bool = False
    freeze_backbone: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) <= 0:
            raise ValueError("scaling constants must be positive")
        # published constants give 1.92; allow 5% around the nominal 2
        product = self.alpha * self.beta**2 * self.gamma**2
        if abs(product - 2.0) > 0.05 * 2.0:
            raise ValueError(f"alpha*beta^2*gamma^2 = {product:.4f} is not close to 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.resolution < 32 or self.resolution % 32:
            raise ValueError(f"resolution must be a positive multiple of 32, got {self.resolution}")

    @classmethod
    def desk(cls, resolution: int = 64, **kw) -> "EffNetConfig":
        return cls(resolution=resolution, desk_scale=True, **kw)

    @property
    def multipliers(self) -> tuple:
        return compound_scale(self.phi, self.alpha, self.beta, self.gamma)

    @property
    def preset(self) -> str:
        return "desk" if self.desk_scale else "paper"

    def to_dict(self) -> dict:
        return asdict(self)


def stage_table(config: EffNetConfig) -> dict:
    """Scaled stem/stage/head widths for ``config``."""
    depth, width, _ = config.multipliers
    stem = round_filters(B0_STEM, width)
    head = round_filters(B0_HEAD, width)
    stages = []
    for s in B0_STAGES:
        stages.append(replace(s, in_ch=round_filters(s.in_ch, width), out_ch=round_filters(s.out_ch, width),
                              repeats=round_repeats(s.repeats, depth)))
    if config.desk_scale:
        stem, head = stem // DESK_DIVISOR, head // DESK_DIVISOR
        stages = [replace(s, in_ch=max(1, s.in_ch // DESK_DIVISOR), out_ch=max(1, s.out_ch // DESK_DIVISOR),
                          repeats=1) for s in stages]
    return {"stem": stem, "stages": stages, "head": head}


class MBConv(Module):
    """Inverted-bottleneck block: expand -> depthwise -> squeeze-excite -> project."""

    def __init__(self, in_ch: int, out_ch: int, expand: int, kernel: int, stride: int,
                 se_ratio: float, rng: np.random.Generator):
        super().__init__()
        if in_ch < 1 or out_ch < 1 or expand < 1 or stride not in (1, 2) or kernel % 2 == 0:
            raise ValueError(f"invalid MBConv descriptor in={in_ch} out={out_ch} e={expand} k={kernel} s={stride}")
        mid = in_ch * expand
        self.in_ch, self.out_ch, self.mid = in_ch, out_ch, mid
        self.expand_ratio, self.kernel, self.stride = expand, kernel, stride
        if expand != 1:
            self.expand_conv = Conv2d(in_ch, mid, 1, rng, padding=0, bias=False)
            self.expand_bn = BatchNorm2d(mid)
        self.dw_conv = DepthwiseConv2d(mid, kernel, rng, stride=stride)
        self.dw_bn = BatchNorm2d(mid)
        self.has_se = se_ratio > 0
        if self.has_se:
            squeeze = max(1, int(in_ch * se_ratio))
            self.se_reduce = Dense(mid, squeeze, rng)
            self.se_expand = Dense(squeeze, mid, rng)
        self.project_conv = Conv2d(mid, out_ch, 1, rng, padding=0, bias=False)
        self.project_bn = BatchNorm2d(out_ch)
        self.residual = stride == 1 and in_ch == out_ch

    def se_gate(self, x: Tensor) -> Tensor:
        s = ops.silu(self.se_reduce(ops.global_avg_pool(x)))
        return ops.sigmoid(self.se_expand(s))

    def forward(self, x: Tensor) -> Tensor:
        return mbconv_forward(self, x)


def mbconv_forward(block: MBConv, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != block.in_ch:
        raise ValueError(f"MBConv expects {block.in_ch} input channels, got shape {x.shape}")
    h = x
    if block.expand_ratio != 1:
        h = ops.silu(block.expand_bn(block.expand_conv(h)))
    h = ops.silu(block.dw_bn(block.dw_conv(h)))
    if block.has_se:
        h = ops.scale_channels(h, block.se_gate(h))
    h = block.project_bn(block.project_conv(h))
    if block.residual:
        h = ops.add(h, x)
    return h


class EffNetModel(Module):
    def __init__(self, config: EffNetConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(init_seed)
        table = stage_table(config)
        self.table = table
        self.stem_conv = Conv2d(config.in_channels, table["stem"], 3, rng, stride=2, padding=1, bias=False)
        self.stem_bn = BatchNorm2d(table["stem"])
        self.blocks: List[MBConv] = []
        self.stage_of_block: List[int] = []
        prev = table["stem"]
        for si, spec in enumerate(table["stages"]):
            if spec.in_ch != prev:
                raise ValueError(f"stage {si} expects {spec.in_ch} input channels but previous stage gives {prev}")
            for r in range(spec.repeats):
                block = MBConv(prev, spec.out_ch, spec.expand, spec.kernel, spec.stride if r == 0 else 1,
                               config.se_ratio, rng)
                self.add_module(f"stage{si}_{r}", block)
                self.blocks.append(block)
                self.stage_of_block.append(si)
                prev = spec.out_ch
        self.head_conv = Conv2d(prev, table["head"], 1, rng, padding=0, bias=False)
        self.head_bn = BatchNorm2d(table["head"])
        self.head_drop = Dropout(config.dropout_rate, seed=[init_seed, 0])
        self.classifier = Dense(table["head"], 1, rng)

    def head_parameters(self) -> list:
        return self.classifier.parameters()

    def trainable_parameters(self) -> list:
        return self.head_parameters() if self.config.freeze_backbone else self.parameters()

    def forward(self, x: Tensor) -> Tensor:
        return effnet_forward(self, x)


def build_effnet_b0(config: Optional[EffNetConfig] = None, init_seed: int = 0) -> EffNetModel:
    return EffNetModel(config or EffNetConfig(), init_seed)


def effnet_forward(model: EffNetModel, batch: Tensor, return_features: bool = False):
    """Melanoma probability per image, shape N x 1.

    With ``return_features`` also returns a dict of per-stage output shapes
    plus ``pre_gap`` (the head feature map that global pooling consumes).
    """
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ValueError(f"expected N x {cfg.in_channels} x H x W input, got {batch.shape}")
    if batch.shape[2:] != (cfg.resolution, cfg.resolution):
        raise ValueError(f"expected {cfg.resolution}x{cfg.resolution} input, got {batch.shape[2:]}")
    shapes = {}
    x = ops.silu(model.stem_bn(model.stem_conv(batch)))
    shapes["stem"] = x.shape
    for si, block in zip(model.stage_of_block, model.blocks):
        x = block(x)
        shapes[f"stage{si}"] = x.shape
    x = ops.silu(model.head_bn(model.head_conv(x)))
    shapes["pre_gap"] = x.shape
    x = model.head_drop(ops.global_avg_pool(x))
    out = ops.sigmoid(model.classifier(x))
    return (out, shapes) if return_features else out
