"""Two-stream feature extractor.

The spatial path brings the image to 1/8 resolution with three stride-2
conv-norm-relu blocks.  The context path continues from the spatial output
with two more stride-2 blocks (1/16, 1/32) and builds the multi-scale context
features::

    cp1 = P1(ARM(F1) + GAP(F1))              # 1/32
    cp2 = P2(ARM(F2)) + Up(cp1)              # 1/16
    cp3 = Up(cp2)                            # 1/8

where P1/P2 are 1x1 projections to ``cp_proj_dim``.  The projections follow
the refinement so ARM runs at the native block width; the cross-scale sums
happen in the shared projected space because the two native widths differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, as_tensor


class PreconditionError(ValueError):
    """Input violates an operation's precondition."""


@dataclass
class BackboneFeatures:
    f_sp: Tensor   # (B, C, H/8, W/8)
    f_cp1: Tensor  # (B, P, H/32, W/32)
    f_cp2: Tensor  # (B, P, H/16, W/16)
    f_cp3: Tensor  # (B, P, H/8, W/8)


class ConvNormReLU(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1):
        self.conv = Conv2d(rng, cin, cout, k, stride=stride, bias=False)
        self.norm = BatchNorm2d(cout)

    def forward(self, x):
        return ops.relu(self.norm(self.conv(x)))


class SpatialPath(Module):
    def __init__(self, rng, config: ModelConfig):
        w = config.spatial_widths
        self.blocks = [ConvNormReLU(rng, cin, cout, 3, stride=2)
                       for cin, cout in zip((3,) + w[:-1], w)]

    def forward(self, image):
        H, W = image.shape[-2:]
        if H % 32 or W % 32:
            raise PreconditionError(f"input {H}x{W} is not a multiple of 32; pad it first")
        x = image
        for block in self.blocks:
            x = block(x)
        return x


class AttentionRefinement(Module):
    """Channel gate: ``x * sigmoid(norm(conv1x1(GAP(x))))``."""

    def __init__(self, rng, channels: int):
        self.conv = Conv2d(rng, channels, channels, 1, bias=False)
        self.norm = BatchNorm2d(channels)

    def forward(self, x):
        gate = ops.sigmoid(self.norm(self.conv(ops.global_avg_pool(x))))
        return ops.mul(x, gate)


class ContextPath(Module):
    def __init__(self, rng, config: ModelConfig):
        c = config.spatial_channels
        w16, w32 = config.context_path_widths
        p = config.cp_proj_dim
        self.down16 = ConvNormReLU(rng, c, w16, 3, stride=2)
        self.down32 = ConvNormReLU(rng, w16, w32, 3, stride=2)
        self.arm32 = AttentionRefinement(rng, w32)
        self.arm16 = AttentionRefinement(rng, w16)
        self.proj32 = Conv2d(rng, w32, p, 1)
        self.proj16 = Conv2d(rng, w16, p, 1)
        self.upsample_mode = config.upsample_mode

    def up(self, x, like):
        return ops.resize(x, like.shape[-2], like.shape[-1], self.upsample_mode)

    def forward(self, f_sp):
        f2 = self.down16(f_sp)
        f1 = self.down32(f2)
        cp1 = self.proj32(ops.add(self.arm32(f1), ops.global_avg_pool(f1)))
        cp2 = ops.add(self.proj16(self.arm16(f2)), self.up(cp1, f2))
        cp3 = self.up(cp2, f_sp)
        return cp1, cp2, cp3


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        self.spatial = SpatialPath(rng, config)
        self.context = ContextPath(rng, config)

    def forward(self, image) -> BackboneFeatures:
        f_sp = self.spatial(image)
        cp1, cp2, cp3 = self.context(f_sp)
        return BackboneFeatures(f_sp, cp1, cp2, cp3)


def _batched(fn, x):
    """Run ``fn`` on a (C, H, W) input as a batch of one."""
    x = ops.reshape(x, (1,) + tuple(x.shape)) if x.ndim == 3 else x
    return fn(x)


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(t, t.shape[1:]) if squeeze else t


def spatial_path(image, backbone: Backbone) -> Tensor:
    """(3, H, W) or (B, 3, H, W) image -> F^SP at 1/8 resolution."""
    image = as_tensor(image)
    return _unbatch(_batched(backbone.spatial, image), image.ndim == 3)


def context_path(f_sp, backbone: Backbone):
    """F^SP -> (cp1, cp2, cp3) at 1/32, 1/16 and 1/8 resolution."""
    f_sp = as_tensor(f_sp)
    outs = _batched(backbone.context, f_sp)
    return tuple(_unbatch(t, f_sp.ndim == 3) for t in outs)


def arm(feature, module: AttentionRefinement) -> Tensor:
    feature = as_tensor(feature)
    return _unbatch(_batched(module, feature), feature.ndim == 3)
