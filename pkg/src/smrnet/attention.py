"""Convolutional block attention: channel mask then spatial mask."""

from __future__ import annotations

from . import tensor as T
from .layers import Conv2d, Linear, Module, global_pool
from .tensor import Tensor


class ChannelAttention(Module):
    """Shared two-layer MLP over avg- and max-pooled channel descriptors."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction ratio {reduction} must divide channel count {channels}")
        self.channels, self.reduction = channels, reduction
        self.fc1 = Linear(channels, channels // reduction)
        self.fc2 = Linear(channels // reduction, channels)

    def mlp(self, v: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(v)))

    def mask(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        if c != self.channels:
            raise T.ShapeError(f"expected {self.channels} channels, got {c}")
        avg = T.reshape(global_pool("avg", x), (n, c))
        mx = T.reshape(global_pool("max", x), (n, c))
        return T.reshape(T.sigmoid(T.add(self.mlp(avg), self.mlp(mx))), (n, c, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return T.mul(x, self.mask(x))


class SpatialAttention(Module):
    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, padding=kernel // 2)

    def mask(self, x: Tensor) -> Tensor:
        pooled = T.concat([T.mean_axes(x, (1,)), T.max_axes(x, (1,))], axis=1)
        return T.sigmoid(self.conv(pooled))

    def forward(self, x: Tensor) -> Tensor:
        return T.mul(x, self.mask(x))


class CBAM(Module):
    """Channel attention followed by spatial attention; shape preserving."""

    def __init__(self, channels: int, reduction: int = 4, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)

    def forward(self, x: Tensor) -> Tensor:
        return self.spatial(self.channel(x))


def cbam_param_count(channels: int, reduction: int = 4, spatial_kernel: int = 7) -> int:
    hidden = channels // reduction
    mlp = channels * hidden + hidden + hidden * channels + channels
    return mlp + 2 * spatial_kernel * spatial_kernel + 1
