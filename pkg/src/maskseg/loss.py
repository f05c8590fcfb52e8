"""Set-matching training objective.

Ground-truth segments are matched one-to-one to queries with a Hungarian
solve over a cost that mirrors the loss; matched queries are then supervised
with BCE + dice on their masks and all queries with a weighted cross-entropy
on their class (unmatched ones towards no-object).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ops
from .head import SegmentPrediction
from .tensor import Tensor, as_tensor

LAMBDA_CE = 5.0
LAMBDA_DICE = 5.0
LAMBDA_CLS = 2.0
DICE_SMOOTH = 1.0


class MatchingError(ValueError):
    """Training instance cannot be matched (more segments than queries)."""


@dataclass
class GroundTruthSegment:
    mask: np.ndarray  # bool (h, w) at mask resolution
    class_id: int
    is_thing: bool = False

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("ground-truth segment mask is empty")
        if self.class_id < 0:
            raise ValueError(f"invalid class id {self.class_id}")


@dataclass
class MatchAssignment:
    pairs: list  # [(gt_index, query_index)] sorted by gt index
    total_cost: float = 0.0

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for g, _ in self.pairs], dtype=int)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for _, q in self.pairs], dtype=int)


@dataclass
class LossWeights:
    ce: float = LAMBDA_CE
    dice: float = LAMBDA_DICE
    cls: float = LAMBDA_CLS
    no_object: float = 0.1
    deep_supervision: bool = True

    @classmethod
    def from_config(cls, config) -> "LossWeights":
        return cls(no_object=config.no_object_weight, deep_supervision=config.deep_supervision)


# ------------------------------------------------------------- mask losses

def dice_loss(pred_mask, gt_mask, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2 sum(p g) + s) / (sum p + sum g + s)`` over the trailing pixels.

    Leading axes are kept: (M, h, w) inputs give M losses.
    """
    p = as_tensor(pred_mask)
    g = np.asarray(getattr(gt_mask, "data", gt_mask), dtype=float)
    axes = tuple(range(p.ndim - 2, p.ndim)) if p.ndim >= 2 else (0,)
    inter = ops.sum(ops.mul(p, g), axis=axes)
    denom = ops.add(ops.sum(p, axis=axes), g.sum(axis=axes) + smooth)
    return ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), smooth), denom))


def mask_bce_loss(mask_logits, gt_mask) -> Tensor:
    """Mean per-pixel binary cross-entropy, evaluated on logits.

    Leading axes are kept like :func:`dice_loss`.
    """
    x = as_tensor(mask_logits)
    g = np.asarray(getattr(gt_mask, "data", gt_mask), dtype=float)
    axes = tuple(range(x.ndim - 2, x.ndim)) if x.ndim >= 2 else (0,)
    return ops.mean(ops.bce_with_logits(x, g), axis=axes)


def classification_loss(class_logits, assignment: MatchAssignment, gt_classes,
                        no_object_weight: float = 0.1) -> Tensor:
    """Weighted mean cross-entropy over all N queries.

    Matched queries target their segment's class with weight 1; the rest
    target the no-object class (index K) with ``no_object_weight``.
    """
    logits = as_tensor(class_logits)
    N, K1 = logits.shape
    target = np.full(N, K1 - 1, dtype=int)
    weight = np.full(N, float(no_object_weight))
    if assignment.pairs:
        gt_classes = np.asarray(gt_classes, dtype=int)
        target[assignment.query_indices] = gt_classes[assignment.gt_indices]
        weight[assignment.query_indices] = 1.0
    onehot = np.zeros((N, K1))
    onehot[np.arange(N), target] = 1.0
    logp = ops.log_softmax(logits, axis=-1)
    nll = ops.mul(ops.sum(ops.mul(logp, onehot), axis=-1), -1.0)
    return ops.div(ops.sum(ops.mul(nll, weight)), weight.sum())


# ---------------------------------------------------------------- matching

def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def match_cost_matrix(pred: SegmentPrediction, gts: list[GroundTruthSegment],
                      weights: LossWeights | None = None) -> np.ndarray:
    """(#GT, N) cost: ce*BCE + dice*Dice - cls*p[class] on soft masks."""
    w = weights or LossWeights()
    logits = pred.mask_logits.data
    N = logits.shape[0]
    if len(gts) > N:
        raise MatchingError(f"{len(gts)} ground-truth segments exceed {N} queries "
                            f"(classes {[g.class_id for g in gts]})")
    if not gts:
        return np.zeros((0, N))
    x = logits.reshape(N, -1)
    g = np.stack([s.mask.reshape(-1) for s in gts]).astype(float)
    if g.shape[1] != x.shape[1]:
        raise ValueError(f"gt masks have {g.shape[1]} pixels, predictions {x.shape[1]}")
    npix = x.shape[1]
    bce = (g @ _softplus(-x).T + (1.0 - g) @ _softplus(x).T) / npix
    p = ops._sigmoid(x)
    dice = 1.0 - (2.0 * g @ p.T + DICE_SMOOTH) / (
        g.sum(1)[:, None] + p.sum(1)[None, :] + DICE_SMOOTH)
    z = pred.class_logits.data
    probs = np.exp(z - z.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    cls = probs[:, [s.class_id for s in gts]].T
    return w.ce * bce + w.dice * dice - w.cls * cls


def hungarian_match(cost) -> MatchAssignment:
    """Minimum-cost assignment of every row to a distinct column (m <= n)."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise MatchingError(f"cannot assign {m} rows to {n} columns")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if m == 0:
        return MatchAssignment([], 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return MatchAssignment(pairs, float(cost[rows, cols].sum()))


# -------------------------------------------------------------- total loss

def single_output_loss(pred: SegmentPrediction, gts: list[GroundTruthSegment],
                       weights: LossWeights):
    """Matched loss for one image and one prediction set; returns (loss, assignment)."""
    assignment = hungarian_match(match_cost_matrix(pred, gts, weights))
    gt_classes = [s.class_id for s in gts]
    loss = ops.mul(classification_loss(pred.class_logits, assignment, gt_classes,
                                       weights.no_object), weights.cls)
    if assignment.pairs:
        q_idx = assignment.query_indices
        gt_masks = np.stack([gts[g].mask for g in assignment.gt_indices]).astype(float)
        logits = ops.getitem(pred.mask_logits, q_idx)
        bce = ops.mean(mask_bce_loss(logits, gt_masks))
        dice = ops.mean(dice_loss(ops.sigmoid(logits), gt_masks))
        loss = ops.add(loss, ops.add(ops.mul(bce, weights.ce), ops.mul(dice, weights.dice)))
    return loss, assignment


def total_loss(pred: SegmentPrediction, aux: list[SegmentPrediction],
               gts: list[GroundTruthSegment], weights: LossWeights | None = None) -> Tensor:
    """Loss of one image summed over the final and (optionally) aux outputs,
    each matched independently."""
    w = weights or LossWeights()
    outputs = [pred] + (list(aux) if w.deep_supervision else [])
    loss = None
    for out in outputs:
        term, _ = single_output_loss(out, gts, w)
        loss = term if loss is None else ops.add(loss, term)
    return loss


def batch_loss(pred: SegmentPrediction, aux: list[SegmentPrediction],
               targets: list[list[GroundTruthSegment]],
               weights: LossWeights | None = None) -> Tensor:
    """Mean of :func:`total_loss` over the images of a batched prediction."""
    terms = [total_loss(pred[b], [a[b] for a in aux], gts, weights)
             for b, gts in enumerate(targets)]
    loss = terms[0]
    for t in terms[1:]:
        loss = ops.add(loss, t)
    return ops.mul(loss, 1.0 / len(terms))
