"""Full model: backbone -> query decoder -> segmentation head."""

from __future__ import annotations

import numpy as np

from . import ops
from .backbone import Backbone, BackboneFeatures
from .config import ModelConfig
from .decoder import QueryDecoder
from .head import SegmentationHead, SegmentPrediction
from .nn import Module
from .tensor import Tensor, as_tensor

# parameter-name prefixes trained at the reduced backbone learning rate
BACKBONE_PREFIX = "backbone."


class SegmentationModel(Module):
    def __init__(self, config: ModelConfig, seed: int | None = None):
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.config = config
        self.backbone = Backbone(rng, config)
        self.decoder = QueryDecoder(rng, config)
        self.head = SegmentationHead(rng, config)

    def features(self, images) -> BackboneFeatures:
        return self.backbone(images)

    def forward(self, images):
        """images (B, 3, H, W) -> (final SegmentPrediction, aux predictions).

        Aux predictions come from every decoder block except the last one,
        whose output is the final prediction.
        """
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {images.shape}")
        feats = self.backbone(images)
        f_hat = self.head.ffm(feats.f_sp, feats.f_cp3)
        final_q, aux = self.decoder(feats, lambda q: self.head.mask_logits(q, f_hat))
        preds = [SegmentPrediction(logits, self.head.class_logits(q.embeddings))
                 for q, logits in aux]
        return preds[-1], preds[:-1]


def forward_full(image, model: SegmentationModel, with_aux: bool = False):
    """Single (3, H, W) image -> SegmentPrediction with (N, H/8, W/8) masks."""
    image = as_tensor(image)
    batched = ops.reshape(image, (1,) + image.shape) if image.ndim == 3 else image
    final, aux = model(batched)
    if image.ndim == 3:
        final = final[0]
        aux = [a[0] for a in aux]
    return (final, aux) if with_aux else final


def pad_to_multiple(image: np.ndarray, multiple: int = 32) -> tuple[np.ndarray, tuple]:
    """Reflect-pad the trailing (H, W) axes up to a multiple; returns the
    padded array and the original (H, W)."""
    H, W = image.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if not ph and not pw:
        return image, (H, W)
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if H > 1 and W > 1 else "edge"
    return np.pad(image, pad, mode=mode), (H, W)


def predict(model: SegmentationModel, image: np.ndarray) -> tuple[SegmentPrediction, tuple]:
    """Inference on one (3, H, W) array of any size; returns the prediction
    on the padded grid and the original size for cropping."""
    padded, size = pad_to_multiple(np.asarray(image, dtype=float))
    return forward_full(Tensor(padded), model), size
