import numpy as np
import pytest

from maskseg.config import ModelConfig, toy_config
from maskseg.harness.cost import classifier_params, count_params
from maskseg.head import FeatureFusion, MaskEmbed, SegmentPrediction, classify, predict_mask_logits, predict_masks
from maskseg.model import SegmentationModel, forward_full
from maskseg.tensor import Tensor
from oracles import conv2d_loop, matmul_loop, sigmoid_scalar, softmax_loop


class TestClassify:
    def test_zero_weights_uniform(self):
        p = classify(np.ones((5, 8)), np.zeros((8, 4)), np.zeros(4)).data
        np.testing.assert_allclose(p, 0.25)

    def test_saturated_one_hot(self):
        q = np.eye(3, 6)
        w = np.zeros((6, 4))
        w[np.arange(3), [2, 0, 3]] = 1e3
        p = classify(q, w).data
        np.testing.assert_allclose(p[np.arange(3), [2, 0, 3]], 1.0)

    def test_oracle(self):
        rng = np.random.default_rng(0)
        q, w, b = rng.normal(size=(5, 8)), rng.normal(size=(8, 4)), rng.normal(size=4)
        logits = matmul_loop(q, w) + b
        expected = np.stack([softmax_loop(list(r)) for r in logits])
        np.testing.assert_allclose(classify(q, w, b).data, expected, atol=1e-7)

    def test_classifier_param_count(self):
        assert classifier_params(ModelConfig()) == 256 * 20 + 20 == 5140
        assert classifier_params(ModelConfig(cls_bias=False)) == 5120


class TestFFM:
    def make(self, seed=1):
        return FeatureFusion(np.random.default_rng(seed), 4, 3, 4, reduction=2).eval()

    def _inputs(self, seed=2):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(1, 4, 4, 5)), rng.normal(size=(1, 3, 4, 5))

    def _f_prime(self, ffm, f_sp, f_cp):
        cat = np.concatenate([f_sp[0], f_cp[0]])
        z = np.maximum(conv2d_loop(cat, ffm.conv.weight.data, None, 1, 1), 0)
        n = ffm.norm
        return (n.gamma.data[:, None, None] * (z - n.running_mean[:, None, None])
                / np.sqrt(n.running_var[:, None, None] + n.eps) + n.beta.data[:, None, None])

    def test_gate_closed_leaves_residual(self):
        ffm = self.make()
        ffm.fc2.weight.data[:] = 0
        ffm.fc2.bias.data[:] = -60
        f_sp, f_cp = self._inputs()
        out = ffm(Tensor(f_sp), Tensor(f_cp)).data[0]
        np.testing.assert_allclose(out, self._f_prime(ffm, f_sp, f_cp), atol=1e-12)

    def test_gate_open_doubles(self):
        ffm = self.make()
        ffm.fc2.weight.data[:] = 0
        ffm.fc2.bias.data[:] = 60
        f_sp, f_cp = self._inputs()
        out = ffm(Tensor(f_sp), Tensor(f_cp)).data[0]
        np.testing.assert_allclose(out, 2 * self._f_prime(ffm, f_sp, f_cp), atol=1e-12)

    def test_step_by_step_expansion(self):
        ffm = self.make(3)
        rng = np.random.default_rng(3)
        ffm.norm.running_mean = rng.normal(size=4)
        ffm.norm.running_var = rng.uniform(0.5, 2, 4)
        ffm.fc1.bias.data[:] = rng.normal(size=2)
        f_sp, f_cp = self._inputs(4)
        fp = self._f_prime(ffm, f_sp, f_cp)
        avg = fp.mean(axis=(1, 2))
        hidden = np.maximum(avg @ ffm.fc1.weight.data + ffm.fc1.bias.data, 0)
        gate = np.array([sigmoid_scalar(v) for v in hidden @ ffm.fc2.weight.data + ffm.fc2.bias.data])
        expected = fp * gate[:, None, None] + fp
        np.testing.assert_allclose(ffm(Tensor(f_sp), Tensor(f_cp)).data[0], expected, atol=1e-10)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError):
            self.make()(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))


class TestMaskEmbed:
    def test_zero_weights(self):
        me = MaskEmbed(np.random.default_rng(0), 8, 6)
        for lin in me.layers:
            lin.weight.data[:] = 0
        assert not np.any(me(Tensor(np.ones((3, 8)))).data)

    def test_hand_computation(self):
        me = MaskEmbed(np.random.default_rng(1), 4, 4)
        for lin in me.layers:
            lin.weight.data = np.eye(4) * 2.0
            lin.bias.data = np.array([0.0, -1.0, 0.5, 0.0])
        x = np.array([[1.0, 0.25, -1.0, 3.0]])
        h1 = np.maximum(2 * x + [0, -1, 0.5, 0], 0)
        h2 = np.maximum(2 * h1 + [0, -1, 0.5, 0], 0)
        np.testing.assert_allclose(me(Tensor(x)).data, 2 * h2 + [0, -1, 0.5, 0])

    def test_default_shape(self):
        me = MaskEmbed(np.random.default_rng(2), 256, 128)
        assert me(Tensor(np.zeros((100, 256)))).shape == (100, 128)


class TestPredictMasks:
    def test_zero_row(self):
        m = np.random.default_rng(0).normal(size=(3, 5))
        m[1] = 0
        out = predict_masks(Tensor(m), Tensor(np.random.default_rng(1).normal(size=(5, 4, 4)))).data
        np.testing.assert_array_equal(out[1], 0.5)

    def test_zero_feature(self):
        out = predict_masks(Tensor(np.ones((3, 5))), Tensor(np.zeros((5, 2, 3)))).data
        np.testing.assert_array_equal(out, 0.5)

    def test_pixel_loop(self):
        rng = np.random.default_rng(2)
        m, f = rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (5, 4, 6))
        out = predict_masks(Tensor(m), Tensor(f)).data
        for i in range(3):
            for h in range(4):
                for w in range(6):
                    dot = sum(m[i, c] * f[c, h, w] for c in range(5))
                    assert abs(out[i, h, w] - sigmoid_scalar(dot)) < 1e-6

    def test_bilinear_in_embedding(self):
        rng = np.random.default_rng(3)
        m1, m2 = rng.normal(size=(2, 1, 3, 5))
        f = Tensor(rng.normal(size=(1, 5, 4, 4)))
        a, b = 0.7, -1.3
        lhs = predict_mask_logits(Tensor(a * m1 + b * m2), f).data
        rhs = a * predict_mask_logits(Tensor(m1), f).data + b * predict_mask_logits(Tensor(m2), f).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestSegmentPrediction:
    def test_from_probabilities_round_trip(self):
        rng = np.random.default_rng(4)
        masks = rng.uniform(0.01, 0.99, (3, 2, 2))
        dists = rng.dirichlet(np.ones(4), 3)
        pred = SegmentPrediction.from_probabilities(masks, dists)
        np.testing.assert_allclose(pred.masks.data, masks)
        np.testing.assert_allclose(pred.class_dists.data, dists)


@pytest.fixture(scope="module")
def model():
    return SegmentationModel(toy_config()).eval()


class TestForwardFull:
    def test_default_shapes(self):
        model = SegmentationModel(ModelConfig(num_classes=5)).eval()
        pred = forward_full(np.zeros((3, 64, 64)), model)
        assert pred.masks.shape == (100, 8, 8) and pred.class_dists.shape == (100, 6)

    def test_invariants(self, model):
        pred, aux = forward_full(np.random.default_rng(5).uniform(-1, 1, (3, 64, 96)), model,
                                 with_aux=True)
        m, p = pred.masks.data, pred.class_dists.data
        assert np.all((m > 0) & (m < 1)) and np.all(np.isfinite(m))
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
        assert len(aux) == model.config.num_blocks - 1

    def test_identical_images_identical_predictions(self, model):
        x = np.random.default_rng(6).uniform(size=(3, 32, 32))
        both, _ = model(np.stack([x, x]))
        np.testing.assert_array_equal(both[0].mask_logits.data, both[1].mask_logits.data)
        np.testing.assert_array_equal(forward_full(x, model).class_logits.data,
                                      forward_full(x, model).class_logits.data)

    def test_doubling_resolution(self, model):
        a = forward_full(np.zeros((3, 32, 64)), model)
        b = forward_full(np.zeros((3, 64, 128)), model)
        assert a.masks.shape[1:] == (4, 8) and b.masks.shape[1:] == (8, 16)
        assert a.class_dists.shape == b.class_dists.shape

    def test_head_is_per_query(self, model):
        rng = np.random.default_rng(7)
        q = Tensor(rng.normal(size=(1, 16, 64)))
        f_hat = Tensor(rng.normal(size=(1, 64, 4, 4)))
        perm = rng.permutation(16)
        a = model.head.mask_logits(q, f_hat).data
        b = model.head.mask_logits(Tensor(q.data[:, perm]), f_hat).data
        np.testing.assert_allclose(a[:, perm], b, atol=1e-10)
        ca = model.head.class_logits(q).data
        cb = model.head.class_logits(Tensor(q.data[:, perm])).data
        np.testing.assert_allclose(ca[:, perm], cb, atol=1e-10)

    def test_param_count_matches_formula(self):
        for cfg in (toy_config(), toy_config(cls_bias=False, num_queries=7)):
            assert SegmentationModel(cfg).num_parameters() == count_params(cfg).total_params
