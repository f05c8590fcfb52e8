"""Segmentation head: feature fusion, classification and mask prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class SegmentPrediction:
    """N (mask, class distribution) pairs, kept as logits.

    Shapes are (B, N, h, w) / (B, N, K+1) for a batch or (N, h, w) / (N, K+1)
    for one image.  Column K of the class axis is the no-object class.
    """

    mask_logits: Tensor
    class_logits: Tensor

    @property
    def masks(self) -> Tensor:
        return ops.sigmoid(self.mask_logits)

    @property
    def class_dists(self) -> Tensor:
        return ops.softmax(self.class_logits, axis=-1)

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[-2]

    def __len__(self) -> int:
        return self.class_logits.shape[0]

    def __getitem__(self, i) -> "SegmentPrediction":
        """Select image ``i`` of a batched prediction."""
        return SegmentPrediction(self.mask_logits[i], self.class_logits[i])

    @classmethod
    def from_probabilities(cls, masks, class_dists) -> "SegmentPrediction":
        """Build from sigmoid masks and class distributions (inverse maps)."""
        m = np.clip(np.asarray(masks, dtype=float), 1e-12, 1 - 1e-12)
        p = np.clip(np.asarray(class_dists, dtype=float), 1e-300, None)
        return cls(Tensor(np.log(m) - np.log1p(-m)), Tensor(np.log(p)))


def classify(q_hat, w_cls, bias=None) -> Tensor:
    """Row-wise softmax of ``q_hat @ w_cls (+ bias)``."""
    return ops.softmax(ops.linear(q_hat, w_cls, bias), axis=-1)


def predict_mask_logits(m_hat, f_hat) -> Tensor:
    """Per-pixel dot products: (B, N, C) x (B, C, h, w) -> (B, N, h, w)."""
    B, C, h, w = f_hat.shape
    if m_hat.shape[-1] != C:
        raise ValueError(f"mask embedding dim {m_hat.shape[-1]} != feature channels {C}")
    flat = ops.matmul(m_hat, ops.reshape(f_hat, (B, C, h * w)))
    return ops.reshape(flat, (B, m_hat.shape[-2], h, w))


def predict_masks(m_hat, f_hat) -> Tensor:
    """Unbatched (N, C) x (C, h, w) or batched form; sigmoid probabilities."""
    if f_hat.ndim == 3:
        m = ops.reshape(m_hat, (1,) + tuple(m_hat.shape))
        f = ops.reshape(f_hat, (1,) + tuple(f_hat.shape))
        logits = predict_mask_logits(m, f)
        return ops.sigmoid(ops.reshape(logits, logits.shape[1:]))
    return ops.sigmoid(predict_mask_logits(m_hat, f_hat))


class FeatureFusion(Module):
    """Concatenate, 3x3 conv + relu + norm, then squeeze-excite reweighting
    with a residual: ``F' * sigmoid(FFN(GAP(F'))) + F'``."""

    def __init__(self, rng, c_sp: int, c_cp: int, c_out: int, reduction: int = 4):
        self.conv = Conv2d(rng, c_sp + c_cp, c_out, 3, bias=False)
        self.norm = BatchNorm2d(c_out)
        self.fc1 = Linear(rng, c_out, c_out // reduction)
        self.fc2 = Linear(rng, c_out // reduction, c_out)

    def gate(self, f_cat):
        B, C = f_cat.shape[:2]
        pooled = ops.reshape(ops.global_avg_pool(f_cat), (B, C))
        weights = ops.sigmoid(self.fc2(ops.relu(self.fc1(pooled))))
        return ops.reshape(weights, (B, C, 1, 1))

    def forward(self, f_sp, f_cp3):
        if f_sp.shape[-2:] != f_cp3.shape[-2:]:
            raise ValueError(f"ffm inputs differ spatially: {f_sp.shape} vs {f_cp3.shape}")
        f_cat = self.norm(ops.relu(self.conv(ops.concat([f_sp, f_cp3], axis=1))))
        return ops.add(ops.mul(f_cat, self.gate(f_cat)), f_cat)


class MaskEmbed(Module):
    """Three linear layers, two relu-activated hidden layers of width D."""

    def __init__(self, rng, dim: int, out_dim: int):
        self.layers = [Linear(rng, dim, dim), Linear(rng, dim, dim), Linear(rng, dim, out_dim)]

    def forward(self, x):
        x = ops.relu(self.layers[0](x))
        x = ops.relu(self.layers[1](x))
        return self.layers[2](x)


class SegmentationHead(Module):
    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        D, C, K = config.hidden_dim, config.spatial_channels, config.num_classes
        self.ffm = FeatureFusion(rng, C, config.cp_proj_dim, C, config.ffm_reduction)
        self.norm = LayerNorm(D)
        self.cls = Linear(rng, D, K + 1, bias=config.cls_bias)
        self.mask_embed = MaskEmbed(rng, D, C)

    def class_logits(self, queries) -> Tensor:
        return self.cls(self.norm(queries))

    def mask_logits(self, queries, f_hat) -> Tensor:
        return predict_mask_logits(self.mask_embed(self.norm(queries)), f_hat)
