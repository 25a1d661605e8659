"""Multi-scale branch fusion and softmax re-weighting of the three scales."""

from __future__ import annotations

from typing import Sequence, Tuple

from . import tensor as T
from .attention import CBAM
from .backbone import FeaturePyramid
from .layers import Conv2d, Linear, Module, global_pool, upsample_nearest
from .tensor import ShapeError, Tensor


class MsffBranch(Module):
    """3x3 conv (optionally dilated) -> attention -> 1x1 projection -> upsample."""

    def __init__(self, cin: int, cf: int, dilation: int = 1, upsample: int = 1,
                 attention: bool = True, reduction: int = 4):
        super().__init__()
        self.conv = Conv2d(cin, cin, 3, padding=dilation, dilation=dilation)
        self.attention = CBAM(cin, reduction) if attention else None
        self.projection = Conv2d(cin, cf, 1)
        self.upsample = upsample

    def forward(self, f: Tensor) -> Tensor:
        x = self.conv(f)
        if self.attention is not None:
            x = self.attention(x)
        return upsample_nearest(self.projection(x), self.upsample)


class Msff(Module):
    def __init__(self, in_channels: Sequence[int], cf: int, dilations: Tuple[int, int] = (2, 4),
                 reduction: int = 4):
        super().__init__()
        c1, c2, c3 = in_channels
        d2, d3 = dilations
        self.branches = [
            MsffBranch(c1, cf, 1, 1, reduction=reduction),
            MsffBranch(c2, cf, d2, 2, reduction=reduction),
            MsffBranch(c3, cf, d3, 4, reduction=reduction),
        ]

    def forward(self, pyr: FeaturePyramid) -> Tuple[Tensor, Tensor, Tensor]:
        h, w = pyr.f1.shape[2:]
        if pyr.f2.shape[2:] != (h // 2, w // 2) or pyr.f3.shape[2:] != (h // 4, w // 4):
            raise ShapeError(
                f"pyramid extents {[f.shape[2:] for f in pyr]} do not halve from level to level")
        return tuple(branch(f) for branch, f in zip(self.branches, pyr))


def msff_forward(branches: Msff, pyr: FeaturePyramid) -> Tuple[Tensor, Tensor, Tensor]:
    return branches(pyr)


def weighted_sum(gs: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Sum of ``gs[i]`` scaled per image by ``weights[:, i]``."""
    n = weights.shape[0]
    out = None
    for i, g in enumerate(gs):
        w = T.reshape(T.gather(T.transpose(weights, (1, 0)), [i]), (n, 1, 1, 1))
        term = T.mul(g, w)
        out = term if out is None else T.add(out, term)
    return out


class RwNet(Module):
    """Per-image softmax weights over the three scales.

    One 1x1 compressor and one MLP are shared by all scales, so permuting
    the inputs permutes the weights.
    """

    def __init__(self, cf: int):
        super().__init__()
        if cf % 4:
            raise ValueError("fused width must be divisible by 4")
        self.compress = Conv2d(cf, cf // 4, 1)
        self.fc1 = Linear(cf // 4, cf // 4)
        self.fc2 = Linear(cf // 4, 1)

    def score(self, g: Tensor) -> Tensor:
        n = g.shape[0]
        v = T.reshape(global_pool("avg", self.compress(g)), (n, -1))
        return self.fc2(T.relu(self.fc1(v)))

    def weights(self, g1: Tensor, g2: Tensor, g3: Tensor) -> Tensor:
        if not g1.shape == g2.shape == g3.shape:
            raise ShapeError(f"scale maps differ in shape: {g1.shape}, {g2.shape}, {g3.shape}")
        scores = T.concat([self.score(g) for g in (g1, g2, g3)], axis=1)
        return T.softmax(scores, axis=1)

    def forward(self, g1: Tensor, g2: Tensor, g3: Tensor) -> Tensor:
        return weighted_sum((g1, g2, g3), self.weights(g1, g2, g3))


def rw_weights(rw: RwNet, g1: Tensor, g2: Tensor, g3: Tensor) -> Tensor:
    return rw.weights(g1, g2, g3)


def rw_fuse(rw: RwNet, g1: Tensor, g2: Tensor, g3: Tensor) -> Tensor:
    return rw(g1, g2, g3)


class ConcatFuse(Module):
    """Channel concatenation squeezed back to the fused width by a 1x1 conv."""

    def __init__(self, cf: int):
        super().__init__()
        self.conv = Conv2d(3 * cf, cf, 1)

    def forward(self, g1: Tensor, g2: Tensor, g3: Tensor) -> Tensor:
        return self.conv(T.concat([g1, g2, g3], axis=1))


def concat_fuse(fuse: ConcatFuse, g1: Tensor, g2: Tensor, g3: Tensor) -> Tensor:
    return fuse(g1, g2, g3)
