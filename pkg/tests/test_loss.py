import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskseg import ops
from maskseg.head import SegmentPrediction
from maskseg.loss import (GroundTruthSegment, LossWeights, MatchAssignment, MatchingError,
                          classification_loss, dice_loss, hungarian_match, mask_bce_loss,
                          match_cost_matrix, single_output_loss, total_loss)
from maskseg.tensor import Tape, Tensor, backward
from oracles import brute_force_assignment, finite_difference, sigmoid_scalar


def random_prediction(rng, N=5, K=3, h=4, w=4):
    return SegmentPrediction(Tensor(rng.normal(0, 2, (N, h, w))), Tensor(rng.normal(size=(N, K + 1))))


def random_gts(rng, m, K=3, h=4, w=4):
    out = []
    for _ in range(m):
        mask = rng.random((h, w)) < 0.4
        mask[rng.integers(h), rng.integers(w)] = True
        out.append(GroundTruthSegment(mask, int(rng.integers(K))))
    return out


class TestDice:
    def test_perfect(self):
        assert dice_loss(np.ones(4), np.ones(4)).item() == 0.0

    def test_disjoint(self):
        assert dice_loss(np.ones((2, 2)), np.zeros((2, 2))).item() == pytest.approx(0.8)

    @pytest.mark.parametrize("n", [1, 4, 9, 100])
    def test_half_over_ones(self, n):
        got = dice_loss(np.full(n, 0.5), np.ones(n)).item()
        assert got == pytest.approx(1 - (n + 1) / (1.5 * n + 1))

    @settings(max_examples=50)
    @given(st.integers(0, 2**31))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(1e-6, 1 - 1e-6, (3, 4, 4))
        g = rng.random((3, 4, 4)) < 0.5
        d = dice_loss(p, g).data
        assert d.shape == (3,) and np.all((d >= 0) & (d < 1))


class TestBCE:
    def test_matching_prediction_near_zero(self):
        g = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert mask_bce_loss((2 * g - 1) * 40, g).item() < 1e-15

    def test_half(self):
        assert mask_bce_loss(np.zeros((3, 3)), np.ones((3, 3))).item() == pytest.approx(math.log(2))

    def test_against_scalar_loop(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-5, 5, (4, 5))
        g = (rng.random((4, 5)) < 0.5).astype(float)
        terms = []
        for v, t in zip(x.ravel(), g.ravel()):
            p = sigmoid_scalar(v)
            terms.append(-(t * math.log(p) + (1 - t) * math.log(1 - p)))
        assert mask_bce_loss(x, g).item() == pytest.approx(math.fsum(terms) / 20, abs=1e-12)

    @given(st.floats(-30, 30), st.booleans())
    def test_nonnegative(self, v, t):
        assert mask_bce_loss(np.full((1, 1), v), np.full((1, 1), float(t))).item() >= 0


class TestClassification:
    def test_perfect_is_zero(self):
        logits = np.full((3, 4), -1e3)
        logits[0, 2] = logits[1, 3] = logits[2, 0] = 0.0
        a = MatchAssignment([(0, 0), (1, 2)])
        assert classification_loss(logits, a, [2, 0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        a = MatchAssignment([(0, 1)])
        assert classification_loss(np.zeros((5, 4)), a, [2], 0.1).item() == pytest.approx(math.log(4))

    def test_single_query(self):
        p = 0.3
        logits = np.log([[p, 1 - p]])
        got = classification_loss(logits, MatchAssignment([(0, 0)]), [0]).item()
        assert got == pytest.approx(-math.log(p))

    def test_weights(self):
        logits = np.log(np.array([[0.5, 0.25, 0.25], [0.2, 0.2, 0.6]]))
        got = classification_loss(logits, MatchAssignment([(0, 0)]), [1], 0.1).item()
        assert got == pytest.approx((-math.log(0.25) - 0.1 * math.log(0.6)) / 1.1)


class TestCostMatrix:
    def test_perfect_pair(self):
        gt = np.zeros((4, 4), dtype=bool)
        gt[1:3] = True
        logits = np.where(gt, 50.0, -50.0)[None]
        cls = np.array([[-1e3, 0.0, -1e3]])
        cost = match_cost_matrix(SegmentPrediction(Tensor(logits), Tensor(cls)),
                                 [GroundTruthSegment(gt, 1)])
        assert cost[0, 0] == pytest.approx(-2.0, abs=1e-9)

    def test_identical_queries_constant_row(self):
        rng = np.random.default_rng(1)
        pred = SegmentPrediction(Tensor(np.tile(rng.normal(size=(1, 4, 4)), (5, 1, 1))),
                                 Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1))))
        cost = match_cost_matrix(pred, random_gts(rng, 3))
        np.testing.assert_allclose(cost, np.repeat(cost[:, :1], 5, axis=1))

    def test_scalar_recomputation(self):
        rng = np.random.default_rng(2)
        pred = random_prediction(rng)
        gts = random_gts(rng, 3)
        cost = match_cost_matrix(pred, gts)
        assert cost.shape == (3, 5)
        for g, seg in enumerate(gts):
            for q in range(5):
                bce = mask_bce_loss(pred.mask_logits.data[q], seg.mask).item()
                dice = dice_loss(ops.sigmoid(pred.mask_logits.data[q]), seg.mask).item()
                z = pred.class_logits.data[q]
                p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
                assert cost[g, q] == pytest.approx(5 * bce + 5 * dice - 2 * p[seg.class_id])

    def test_too_many_segments(self):
        rng = np.random.default_rng(3)
        with pytest.raises(MatchingError, match="exceed"):
            match_cost_matrix(random_prediction(rng, N=2), random_gts(rng, 3))


class TestHungarian:
    def test_two_by_two(self):
        a = hungarian_match([[1, 2], [2, 1]])
        assert a.pairs == [(0, 0), (1, 1)] and a.total_cost == 2

    def test_diagonal(self):
        cost = np.ones((4, 6)) * 5
        cost[np.arange(4), np.arange(4)] = 0
        assert hungarian_match(cost).pairs == [(i, i) for i in range(4)]

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 6), st.integers(0, 2))
    def test_brute_force(self, seed, m, extra):
        rng = np.random.default_rng(seed)
        cost = rng.normal(size=(m, m + extra))
        a = hungarian_match(cost)
        assert len(a.pairs) == m
        assert len(set(a.query_indices.tolist())) == m
        assert a.total_cost == pytest.approx(sum(cost[g, q] for g, q in a.pairs))
        assert a.total_cost == pytest.approx(brute_force_assignment(cost), abs=1e-9)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31))
    def test_swapping_never_improves(self, seed):
        rng = np.random.default_rng(seed)
        cost = rng.normal(size=(4, 6))
        a = hungarian_match(cost)
        cols = a.query_indices
        for i in range(4):
            for j in range(i + 1, 4):
                swapped = cols.copy()
                swapped[[i, j]] = swapped[[j, i]]
                assert cost[np.arange(4), swapped].sum() >= a.total_cost - 1e-12

    def test_non_finite(self):
        with pytest.raises(ValueError):
            hungarian_match([[np.inf, 0.0]])

    def test_more_rows_than_columns(self):
        with pytest.raises(MatchingError):
            hungarian_match(np.zeros((3, 2)))


class TestTotalLoss:
    def test_zero_gt_uniform(self):
        pred = SegmentPrediction(Tensor(np.zeros((4, 2, 2))), Tensor(np.zeros((4, 3))))
        aux = [pred, pred]
        assert total_loss(pred, aux, []).item() == pytest.approx(3 * 2 * math.log(3))
        no_ds = LossWeights(deep_supervision=False)
        assert total_loss(pred, aux, [], no_ds).item() == pytest.approx(2 * math.log(3))

    def test_perfect_is_zero(self):
        gt = np.zeros((1, 4, 4), dtype=bool)
        gt[0, :2] = True
        logits = np.concatenate([np.where(gt, 60.0, -60.0), np.full((2, 4, 4), -60.0)])
        cls = np.full((3, 3), -1e3)
        cls[0, 1] = 0
        cls[1:, 2] = 0
        pred = SegmentPrediction(Tensor(logits), Tensor(cls))
        gts = [GroundTruthSegment(gt[0], 1)]
        # dice of a perfect mask is exactly 0; BCE at |logit| = 60 is ~1e-26
        assert total_loss(pred, [pred, pred], gts).item() == pytest.approx(0.0, abs=1e-12)

    def test_composition(self):
        rng = np.random.default_rng(4)
        pred, gts = random_prediction(rng), random_gts(rng, 2)
        a = hungarian_match(match_cost_matrix(pred, gts))
        q, g = a.query_indices, a.gt_indices
        gm = np.stack([gts[i].mask for i in g])
        bce = np.mean([mask_bce_loss(pred.mask_logits.data[qi], gm[k]).item() for k, qi in enumerate(q)])
        dice = np.mean([dice_loss(ops.sigmoid(pred.mask_logits.data[qi]), gm[k]).item()
                        for k, qi in enumerate(q)])
        cls = classification_loss(pred.class_logits, a, [s.class_id for s in gts]).item()
        loss, _ = single_output_loss(pred, gts, LossWeights())
        assert loss.item() == pytest.approx(5 * bce + 5 * dice + 2 * cls)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        pred, gts = random_prediction(rng), random_gts(rng, 3)
        base = total_loss(pred, [], gts).item()
        perm = rng.permutation(5)
        shuffled = SegmentPrediction(Tensor(pred.mask_logits.data[perm]),
                                     Tensor(pred.class_logits.data[perm]))
        assert total_loss(shuffled, [], gts).item() == pytest.approx(base, abs=1e-10)
        assert total_loss(pred, [], gts[::-1]).item() == pytest.approx(base, abs=1e-10)

    def test_empty_gt_mask_rejected(self):
        with pytest.raises(ValueError):
            GroundTruthSegment(np.zeros((2, 2)), 0)

    def test_head_gradient_small_instance(self):
        """2 queries, 1 GT: gradients w.r.t. logit-producing head weights."""
        rng = np.random.default_rng(5)
        emb = rng.normal(size=(2, 3))
        feat = rng.normal(size=(3, 3, 3))
        w_mask = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        w_cls = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        gts = [GroundTruthSegment(rng.random((3, 3)) < 0.5, 1)]
        gts[0].mask[0, 0] = True

        def loss_of(wm, wc):
            m = ops.matmul(ops.matmul(emb, wm), feat.reshape(3, 9))
            pred = SegmentPrediction(ops.reshape(m, (2, 3, 3)), ops.matmul(emb, wc))
            return total_loss(pred, [], gts)

        with Tape() as tape:
            loss = loss_of(w_mask, w_cls)
        backward(tape, loss)
        for t in (w_mask, w_cls):
            fd = finite_difference(lambda: loss_of(Tensor(w_mask.data), Tensor(w_cls.data)).item(),
                                   t.data)
            num = np.array([fd[i] for i in range(t.size)]).reshape(t.shape)
            np.testing.assert_allclose(t.grad, num, rtol=1e-3, atol=1e-7)
