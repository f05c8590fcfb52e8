"""Dataset-level evaluation of a model."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..metrics import ConfusionMatrix, PQAccumulator
from ..model import SegmentationModel, predict
from ..postprocess import ClassInfo, PanopticMap, Segment, panoptic_inference, semantic_inference
from .data import DatasetRecord


def crop_panoptic(pan: PanopticMap, size: tuple) -> PanopticMap:
    """Crop a panoptic map to the top-left ``size`` and recount segments."""
    H, W = size
    ids = pan.segment_ids[:H, :W]
    segments = []
    for s in pan.segments:
        count = int((ids == s.segment_id).sum())
        if count:
            segments.append(Segment(s.segment_id, s.class_id, s.is_thing, count))
    return PanopticMap(ids.copy(), segments)


def infer_semantic(model: SegmentationModel, image: np.ndarray) -> np.ndarray:
    pred, (H, W) = predict(model, image)
    padded = image.shape[-2] + (-H) % 32, image.shape[-1] + (-W) % 32
    return semantic_inference(pred, padded)[:H, :W]


def infer_panoptic(model: SegmentationModel, image: np.ndarray,
                   classes: list[ClassInfo]) -> PanopticMap:
    pred, (H, W) = predict(model, image)
    padded = H + (-H) % 32, W + (-W) % 32
    return crop_panoptic(panoptic_inference(pred, classes, padded), (H, W))


def _evaluate_one(model, record: DatasetRecord):
    cm = ConfusionMatrix(len(record.classes), record.ignore_label)
    pq = PQAccumulator(record.classes)
    pred, (H, W) = predict(model, record.image)
    padded = H + (-H) % 32, W + (-W) % 32
    cm.update(semantic_inference(pred, padded)[:H, :W], record.semantic)
    pq.update(crop_panoptic(panoptic_inference(pred, record.classes, padded), (H, W)),
              record.panoptic())
    return cm, pq


def evaluate(model: SegmentationModel, records: list[DatasetRecord], workers: int = 1):
    """Returns (ConfusionMatrix, PQAccumulator) over ``records``.

    With ``workers > 1`` images are scored on a thread pool and the
    per-image accumulators merged in record order, so results do not depend
    on scheduling.
    """
    if not records:
        raise ValueError("no records to evaluate")
    model.eval()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda r: _evaluate_one(model, r), records))
    else:
        parts = [_evaluate_one(model, r) for r in records]
    cm, pq = parts[0]
    for c, p in parts[1:]:
        cm, pq = cm.merge(c), pq.merge(p)
    return cm, pq
