"""Turn a SegmentPrediction into a semantic label map or a panoptic map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import _sigmoid, interp_matrix


@dataclass
class ClassInfo:
    name: str
    is_thing: bool


@dataclass
class Segment:
    segment_id: int
    class_id: int
    is_thing: bool
    pixel_count: int


@dataclass
class PanopticMap:
    segment_ids: np.ndarray            # int (H, W), 0 = void
    segments: list = field(default_factory=list)

    def segment(self, segment_id: int) -> Segment:
        for s in self.segments:
            if s.segment_id == segment_id:
                return s
        raise KeyError(segment_id)

    def validate(self) -> None:
        ids, counts = np.unique(self.segment_ids, return_counts=True)
        present = {int(i): int(c) for i, c in zip(ids, counts) if i != 0}
        listed = [s.segment_id for s in self.segments]
        if len(set(listed)) != len(listed):
            raise ValueError("duplicate segment ids")
        if set(listed) != set(present):
            raise ValueError(f"segment table {sorted(listed)} != map ids {sorted(present)}")
        for s in self.segments:
            if s.pixel_count != present[s.segment_id]:
                raise ValueError(f"segment {s.segment_id} count {s.pixel_count} "
                                 f"!= {present[s.segment_id]}")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _probabilities(pred) -> tuple[np.ndarray, np.ndarray]:
    return _sigmoid(pred.mask_logits.data), _softmax(pred.class_logits.data)


def upsample_probabilities(masks: np.ndarray, out_size: tuple, mode: str = "bilinear") -> np.ndarray:
    """(N, h, w) -> (N, H, W) with half-pixel centers."""
    H, W = out_size
    Ah = interp_matrix(masks.shape[-2], H, mode)
    Aw = interp_matrix(masks.shape[-1], W, mode)
    return Ah @ masks @ Aw.T


def _full_res_masks(pred, out_size, threshold_first: bool) -> tuple[np.ndarray, np.ndarray]:
    masks, probs = _probabilities(pred)
    if threshold_first:
        masks = (masks >= 0.5).astype(float)
        return upsample_probabilities(masks, out_size, "nearest"), probs
    return upsample_probabilities(masks, out_size), probs


def semantic_inference(pred, out_size: tuple, threshold_first: bool = False) -> np.ndarray:
    """Label map (H, W): argmax_k sum_i p_i[k] m_i over real classes."""
    masks, probs = _full_res_masks(pred, out_size, threshold_first)
    scores = np.einsum("nk,nhw->khw", probs[:, :-1], masks)
    return scores.argmax(axis=0).astype(np.int64)


def panoptic_inference(pred, classes: list[ClassInfo], out_size: tuple,
                       object_score_threshold: float = 0.8,
                       overlap_threshold: float = 0.8,
                       threshold_first: bool = False) -> PanopticMap:
    masks, probs = _full_res_masks(pred, out_size, threshold_first)
    K = probs.shape[1] - 1
    labels = probs[:, :K].argmax(axis=1)
    scores = probs[np.arange(len(probs)), labels]
    keep = (scores >= object_score_threshold) & (probs.argmax(axis=1) != K)
    H, W = out_size
    seg_ids = np.zeros((H, W), dtype=np.int64)
    segments: list[Segment] = []
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        return PanopticMap(seg_ids, segments)
    weighted = scores[kept, None, None] * masks[kept]
    winner = weighted.argmax(axis=0)
    stuff_ids: dict[int, int] = {}
    for j, q in enumerate(kept):
        cls = int(labels[q])
        mask_area = masks[q] >= 0.5
        won = (winner == j) & mask_area
        area, original = int(won.sum()), int(mask_area.sum())
        if area == 0 or original == 0 or area < overlap_threshold * original:
            continue
        is_thing = classes[cls].is_thing
        if not is_thing and cls in stuff_ids:
            sid = stuff_ids[cls]
            seg_ids[won] = sid
            seg = next(s for s in segments if s.segment_id == sid)
            seg.pixel_count += area
            continue
        sid = len(segments) + 1
        seg_ids[won] = sid
        segments.append(Segment(sid, cls, is_thing, area))
        if not is_thing:
            stuff_ids[cls] = sid
    return PanopticMap(seg_ids, segments)
