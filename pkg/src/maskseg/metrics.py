"""Mean IoU and Panoptic Quality with mergeable accumulators."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .postprocess import ClassInfo, PanopticMap


class ConfusionMatrix:
    """Dataset-level (K, K) pixel counts, rows = ground truth."""

    def __init__(self, num_classes: int, ignore_label: int = 255):
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
        valid = gt != self.ignore_label
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        K = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= K or p.min() < 0 or p.max() >= K):
            raise ValueError("labels outside [0, K)")
        self.counts += np.bincount(g * K + p, minlength=K * K).reshape(K, K)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_label)
        out.counts = self.counts + other.counts
        return out

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both GT and prediction."""
        tp = np.diag(self.counts).astype(float)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        iou = self.iou()
        if np.all(np.isnan(iou)):
            warnings.warn("no scored pixels; mIoU defined as 0", RuntimeWarning, stacklevel=2)
            return 0.0
        return float(np.nanmean(iou))


def miou(preds, gts, num_classes: int, ignore_label: int = 255):
    """Returns (mIoU, per-class IoU array)."""
    cm = ConfusionMatrix(num_classes, ignore_label)
    for p, g in zip(preds, gts, strict=True):
        cm.update(p, g)
    return cm.miou(), cm.iou()


@dataclass
class ClassStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    pq_thing: float
    pq_stuff: float
    per_class: list = field(default_factory=list)  # (class_id, iou_sum, tp, fp, fn)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self) -> str:
        lines = [f"{'':8}{'PQ':>8}{'SQ':>8}{'RQ':>8}",
                 f"{'All':8}{100 * self.pq:8.2f}{100 * self.sq:8.2f}{100 * self.rq:8.2f}",
                 f"{'Things':8}{100 * self.pq_thing:8.2f}",
                 f"{'Stuff':8}{100 * self.pq_stuff:8.2f}"]
        return "\n".join(lines)


def match_segments(pred: PanopticMap, gt: PanopticMap):
    """Per-image PQ matching.

    Returns ``(matches, unmatched_pred, unmatched_gt)`` where matches are
    (gt_id, pred_id, iou).  A pair matches iff classes agree and IoU > 0.5;
    GT-void pixels inside a predicted segment are left out of the union, and
    predictions that are mostly void are not returned as unmatched.
    """
    if pred.segment_ids.shape != gt.segment_ids.shape:
        raise ValueError(f"panoptic map shapes differ: {pred.segment_ids.shape} "
                         f"vs {gt.segment_ids.shape}")
    p_ids = pred.segment_ids.astype(np.int64).ravel()
    g_ids = gt.segment_ids.astype(np.int64).ravel()
    offset = int(max(p_ids.max(initial=0), 0)) + 1
    pair, inter = np.unique(g_ids * offset + p_ids, return_counts=True)
    inter_of = {(int(k // offset), int(k % offset)): int(c) for k, c in zip(pair, inter)}
    gt_area = {s.segment_id: s.pixel_count for s in gt.segments}
    pred_area = {s.segment_id: s.pixel_count for s in pred.segments}
    gt_cls = {s.segment_id: s.class_id for s in gt.segments}
    pred_cls = {s.segment_id: s.class_id for s in pred.segments}

    matches = []
    used_g, used_p = set(), set()
    for (g, p), n in inter_of.items():
        if g == 0 or p == 0 or gt_cls[g] != pred_cls[p]:
            continue
        union = pred_area[p] + gt_area[g] - n - inter_of.get((0, p), 0)
        iou = n / union
        if iou > 0.5:
            matches.append((g, p, iou))
            used_g.add(g)
            used_p.add(p)
    unmatched_gt = [g for g in gt_area if g not in used_g]
    unmatched_pred = [p for p in pred_area if p not in used_p
                      and inter_of.get((0, p), 0) / pred_area[p] <= 0.5]
    return sorted(matches), sorted(unmatched_pred), sorted(unmatched_gt)


class PQAccumulator:
    def __init__(self, classes: list[ClassInfo]):
        self.classes = classes
        self.stats = {c: ClassStats() for c in range(len(classes))}

    def update(self, pred: PanopticMap, gt: PanopticMap) -> None:
        for ids in (pred, gt):
            if len({s.segment_id for s in ids.segments}) != len(ids.segments):
                raise ValueError("overlapping or duplicate segments in a panoptic map")
        matches, fps, fns = match_segments(pred, gt)
        gt_cls = {s.segment_id: s.class_id for s in gt.segments}
        pred_cls = {s.segment_id: s.class_id for s in pred.segments}
        for g, _, iou in matches:
            st = self.stats[gt_cls[g]]
            st.tp += 1
            st.iou_sum += iou
        for p in fps:
            self.stats[pred_cls[p]].fp += 1
        for g in fns:
            self.stats[gt_cls[g]].fn += 1

    def merge(self, other: "PQAccumulator") -> "PQAccumulator":
        out = PQAccumulator(self.classes)
        for c in out.stats:
            a, b = self.stats[c], other.stats[c]
            out.stats[c] = ClassStats(a.iou_sum + b.iou_sum, a.tp + b.tp, a.fp + b.fp, a.fn + b.fn)
        return out

    def result(self) -> PQResult:
        per_pq, per_sq, per_rq = {}, {}, {}
        for c, st in self.stats.items():
            denom = st.tp + 0.5 * st.fp + 0.5 * st.fn
            if st.tp + st.fp + st.fn == 0:
                continue
            per_pq[c] = st.iou_sum / denom
            per_sq[c] = st.iou_sum / st.tp if st.tp else 0.0
            per_rq[c] = st.tp / denom

        def avg(values, subset=None):
            vals = [v for c, v in values.items() if subset is None or c in subset]
            return float(np.mean(vals)) if vals else 0.0

        things = {c for c, info in enumerate(self.classes) if info.is_thing}
        stuff = set(range(len(self.classes))) - things
        per_class = [(c, st.iou_sum, st.tp, st.fp, st.fn) for c, st in self.stats.items()]
        return PQResult(avg(per_pq), avg(per_sq), avg(per_rq),
                        avg(per_pq, things), avg(per_pq, stuff), per_class)


def panoptic_quality(preds, gts, classes: list[ClassInfo]) -> PQResult:
    acc = PQAccumulator(classes)
    for p, g in zip(preds, gts, strict=True):
        acc.update(p, g)
    return acc.result()
