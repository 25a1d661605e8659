"""Residual backbone with stage-level attention, emitting strides 8/16/32."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

from . import tensor as T
from .attention import CBAM, cbam_param_count
from .layers import BatchNorm2d, Conv2d, Module, pool2d
from .tensor import ShapeError, Tensor

PRESETS = {
    "tiny": {"channels": [16, 16, 32, 64, 128], "blocks": [1, 1, 1, 1]},
    "full": {"channels": [64, 64, 128, 256, 512], "blocks": [3, 4, 6, 3]},
}


@dataclass
class BackboneConfig:
    channels: List[int] = field(default_factory=lambda: list(PRESETS["tiny"]["channels"]))
    blocks: List[int] = field(default_factory=lambda: list(PRESETS["tiny"]["blocks"]))
    attention_enabled: bool = True
    per_block_attention: bool = False
    in_channels: int = 1
    reduction: int = 4

    @classmethod
    def preset(cls, name: str, **overrides) -> "BackboneConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset '{name}' (expected one of {sorted(PRESETS)})")
        p = PRESETS[name]
        return cls(channels=list(p["channels"]), blocks=list(p["blocks"]), **overrides)


class FeaturePyramid(NamedTuple):
    f1: Tensor  # stride 8
    f2: Tensor  # stride 16
    f3: Tensor  # stride 32


class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.proj: Optional[Conv2d] = None
        self.proj_bn: Optional[BatchNorm2d] = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride=stride, bias=False)
            self.proj_bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return T.relu(T.add(out, shortcut))


class Stage(Module):
    def __init__(self, cin: int, cout: int, n_blocks: int, stride: int, cfg: BackboneConfig):
        super().__init__()
        self.blocks = [ResidualBlock(cin if i == 0 else cout, cout, stride if i == 0 else 1)
                       for i in range(n_blocks)]
        self.block_attention: List[CBAM] = []
        self.attention: Optional[CBAM] = None
        if cfg.attention_enabled:
            if cfg.per_block_attention:
                self.block_attention = [CBAM(cout, cfg.reduction) for _ in range(n_blocks)]
            else:
                self.attention = CBAM(cout, cfg.reduction)

    def forward(self, x: Tensor) -> Tensor:
        for i, block in enumerate(self.blocks):
            x = block(x)
            if self.block_attention:
                x = self.block_attention[i](x)
        if self.attention is not None:
            x = self.attention(x)
        return x


class Backbone(Module):
    """conv1 (7x7/2 + 3x3/2 max pool) then four residual stages.

    The outputs of the third, fourth and fifth stages form the pyramid.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.conv1 = Conv2d(cfg.in_channels, c[0], 7, stride=2, padding=3, bias=False)
        self.bn1 = BatchNorm2d(c[0])
        self.attention1 = CBAM(c[0], cfg.reduction) if cfg.attention_enabled else None
        self.stages = [Stage(c[i], c[i + 1], cfg.blocks[i], 1 if i == 0 else 2, cfg)
                       for i in range(4)]

    def forward(self, image: Tensor) -> FeaturePyramid:
        n, cin, h, w = image.shape
        if cin != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {cin}")
        if h % 32 or w % 32 or h < 64 or w < 64:
            raise ShapeError(f"input {h}x{w} must be >= 64 and divisible by 32")
        x = T.relu(self.bn1(self.conv1(image)))
        x = pool2d("max", x, 3, 2, padding=1)
        if self.attention1 is not None:
            x = self.attention1(x)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return FeaturePyramid(taps[1], taps[2], taps[3])


def backbone_forward(cfg: BackboneConfig, params: Backbone, image: Tensor) -> FeaturePyramid:
    if params.cfg != cfg:
        raise ValueError("parameters were built for a different backbone config")
    return params(image)


def conv_param_count(cin: int, cout: int, kernel: int, bias: bool = True) -> int:
    return cin * cout * kernel * kernel + (cout if bias else 0)


def param_count(cfg: BackboneConfig) -> int:
    """Exact trainable scalar count, computed in closed form from the config."""
    c = cfg.channels
    total = conv_param_count(cfg.in_channels, c[0], 7, bias=False) + 2 * c[0]
    if cfg.attention_enabled:
        total += cbam_param_count(c[0], cfg.reduction)
    for i in range(4):
        cin, cout = c[i], c[i + 1]
        for b in range(cfg.blocks[i]):
            bin_ = cin if b == 0 else cout
            stride = (1 if i == 0 else 2) if b == 0 else 1
            total += conv_param_count(bin_, cout, 3, False) + conv_param_count(cout, cout, 3, False)
            total += 4 * cout
            if stride != 1 or bin_ != cout:
                total += conv_param_count(bin_, cout, 1, False) + 2 * cout
        if cfg.attention_enabled:
            n_att = cfg.blocks[i] if cfg.per_block_attention else 1
            total += n_att * cbam_param_count(cout, cfg.reduction)
    return total
