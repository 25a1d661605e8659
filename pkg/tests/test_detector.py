import math

import numpy as np
import pytest

from smrnet import layers as L
from smrnet import tensor as T
from smrnet.boxes import BBox, iou
from smrnet.config import RunConfig
from smrnet.detector import (DET_MAX, EVAL_PROPOSALS, SGD, DetectionHead, ProposalConfig,
                             RpnHead, SMRNet, Target, bce_with_logits, build_model, cross_entropy,
                             detection_head, flatten_rpn, infer, infer_batch, label_anchors,
                             roi_pool, roi_pool_batch, rpn_forward, sample_labels,
                             select_proposals, smooth_l1, smr_losses, training_step)
from smrnet.synthgel import render_sample
from smrnet.tensor import ShapeError, Tensor, grad_check

from oracles import naive_roi_pool


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestLosses:
    def test_smooth_l1_values(self):
        out = smooth_l1(t64([0.5, -2.0]), np.zeros(2)).item()
        assert out == pytest.approx(0.125 + 1.5)

    def test_bce_reference(self):
        x, t = np.array([-3.0, 0.0, 4.0]), np.array([0, 1, 1])
        p = 1 / (1 + np.exp(-x))
        ref = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
        assert bce_with_logits(t64(x), t).item() == pytest.approx(ref, rel=1e-12)

    def test_bce_extreme_logits_finite(self):
        assert math.isfinite(bce_with_logits(t64([800.0, -800.0]), np.array([0, 1])).item())

    def test_cross_entropy_reference(self):
        x = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        lab = np.array([1, 2])
        ref = -np.mean([math.log(math.exp(x[r, lab[r]]) / np.exp(x[r]).sum()) for r in range(2)])
        assert cross_entropy(t64(x), lab).item() == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("shape", [(5,), (3, 4), (8, 2)])
    def test_gradients(self, shape):
        rng = np.random.default_rng(0)
        x = t64(rng.standard_normal(shape) * 2)
        tgt = rng.standard_normal(shape)
        bits = (rng.random(shape) > 0.5).astype(float)
        assert grad_check(lambda t: smooth_l1(t, tgt), x) <= 1e-4
        assert grad_check(lambda t: bce_with_logits(t, bits), x) <= 1e-4
        if len(shape) == 2:
            lab = rng.integers(0, shape[1], shape[0])
            assert grad_check(lambda t: cross_entropy(t, lab), x) <= 1e-4


class TestRpn:
    def test_output_shapes(self):
        head = RpnHead(8, 9).to(np.float64)
        L.init_params(head, np.random.default_rng(0))
        logits, deltas = rpn_forward(head, t64(np.zeros((2, 8, 12, 12))))
        assert logits.shape == (2, 9, 12, 12) and deltas.shape == (2, 36, 12, 12)

    @pytest.mark.parametrize("combine,shape", [("sum", (2, 4, 5, 5)), ("sum", (1, 8, 3, 4)),
                                               ("concat", (2, 4, 4, 4))])
    def test_gradients(self, combine, shape):
        head = RpnHead(shape[1], 3, combine).to(np.float64)
        L.init_params(head, np.random.default_rng(1))
        x = t64(np.random.default_rng(2).standard_normal(shape))

        def f(t):
            a, b = head(t)
            return T.concat([T.reshape(a, (shape[0], -1)), T.reshape(b, (shape[0], -1))], axis=1)

        assert grad_check(f, x, params=head.parameters(), max_coords=15) <= 1e-4

    def test_flatten_order(self):
        a, h, w = 2, 2, 3
        logits = np.arange(a * h * w, dtype=float).reshape(a, h, w)
        deltas = np.arange(4 * a * h * w, dtype=float).reshape(4 * a, h, w)
        s, d = flatten_rpn(logits, deltas)
        # index (row, col, anchor) = (1, 2, 1)
        k = (1 * w + 2) * a + 1
        assert s[k] == logits[1, 1, 2]
        assert d[k].tolist() == [deltas[4 + j, 1, 2] for j in range(4)]

    def test_select_proposals_bounds(self):
        rng = np.random.default_rng(3)
        anchors = np.array([[0, 0, 16, 16], [8, 8, 40, 40], [9, 9, 41, 41], [60, 60, 90, 90]], float)
        logits = rng.standard_normal((4, 1, 1))
        deltas = np.zeros((16, 1, 1))
        boxes, scores = select_proposals(logits, deltas, anchors, ProposalConfig(10, 0.7, 3),
                                         (96, 96))
        assert len(boxes) == 3  # one of the near-duplicates is suppressed
        assert np.all(np.diff(scores) <= 0)
        assert boxes.min() >= 0 and boxes.max() <= 96


class TestRoiPool:
    @pytest.mark.parametrize("roi", [(0, 0, 96, 96), (10, 13, 50, 70), (3.5, 3.5, 9.0, 11.0),
                                     (80, 0, 96, 20), (-8, -8, 30, 30)])
    def test_against_naive(self, roi):
        feat = np.random.default_rng(4).standard_normal((1, 3, 12, 12))
        got = roi_pool(t64(feat), BBox(*roi), stride=8).data
        np.testing.assert_array_equal(got, naive_roi_pool(feat, roi, 8, 7))

    def test_batch_index(self):
        feat = np.random.default_rng(5).standard_normal((2, 2, 6, 6))
        out = roi_pool_batch(t64(feat), np.array([[0, 0, 48, 48]] * 2), np.array([1, 0]), 8, 3).data
        np.testing.assert_array_equal(out[0], naive_roi_pool(feat[1:], (0, 0, 48, 48), 8, 3))
        np.testing.assert_array_equal(out[1], naive_roi_pool(feat[:1], (0, 0, 48, 48), 8, 3))

    def test_outside_roi_rejected(self):
        with pytest.raises(ShapeError):
            roi_pool(t64(np.zeros((1, 1, 4, 4))), BBox(100, 100, 120, 120), stride=8)

    @pytest.mark.parametrize("rois", [[[0, 0, 40, 40]], [[4, 4, 30, 20], [10, 0, 48, 48]],
                                      [[0, 0, 8, 8], [0, 0, 48, 16], [16, 16, 48, 48]]])
    def test_gradients(self, rois):
        feat = t64(np.random.default_rng(6).standard_normal((2, 2, 6, 6)))
        rois = np.array(rois, float)
        owners = np.arange(len(rois)) % 2
        assert grad_check(lambda t: roi_pool_batch(t, rois, owners, 8, 3), feat) <= 1e-4


class TestDetectionHead:
    def test_shapes(self):
        head = DetectionHead(64, 256)
        cls, reg = detection_head(Tensor(np.zeros((5, 64, 7, 7), np.float32)), head)
        assert cls.shape == (5, 3) and reg.shape == (5, 12)
        assert head.fc1.weight.shape == (256, 3136)

    @pytest.mark.parametrize("r,c,hidden", [(2, 2, 8), (4, 1, 6), (3, 3, 5)])
    def test_gradients(self, r, c, hidden):
        head = DetectionHead(c, hidden, pool=3).to(np.float64)
        L.init_params(head, np.random.default_rng(7))
        x = t64(np.random.default_rng(8).standard_normal((r, c, 3, 3)))

        def f(t):
            a, b = head(t)
            return T.concat([a, b], axis=1)

        assert grad_check(f, x, params=head.parameters(), max_coords=20) <= 1e-4


class TestTargets:
    def test_label_anchors_best_anchor_positive(self):
        anchors = np.array([[0, 0, 10, 10], [50, 50, 60, 60], [0, 0, 30, 30]], float)
        labels, matched = label_anchors(anchors, np.array([[0, 0, 25, 25]], float))
        assert labels.tolist() == [0, 0, 1] and matched[2] == 0

    def test_label_thresholds(self):
        gt = np.array([[0, 0, 10, 10]], float)
        anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 8], [0, 0, 10, 5], [0, 0, 10, 2.5]], float)
        labels, _ = label_anchors(anchors, gt)
        assert labels.tolist() == [1, 1, -1, 0]

    def test_sample_labels_caps(self):
        labels = np.array([1] * 200 + [0] * 1000 + [-1] * 50)
        pos, neg = sample_labels(labels, 256, 0.5, np.random.default_rng(0))
        assert len(pos) == 128 and len(neg) == 128
        assert np.all(labels[pos] == 1) and np.all(labels[neg] == 0)
        assert np.all(np.diff(pos) > 0)


def images_and_targets(n=2, size=96):
    imgs, tg = [], []
    for i in range(n):
        s = render_sample("AB"[i % 2], np.random.default_rng(i))
        imgs.append(s.image)
        tg.append(Target(s.gt_box.as_array()[None], np.array([1 + i % 2])))
    return np.stack(imgs), tg


class TestModel:
    @pytest.mark.parametrize("overrides,stride", [({}, 8), ({"msff_enabled": False}, 32),
                                                  ({"rw_enabled": False}, 8),
                                                  ({"attention_enabled": False}, 8)])
    def test_variants_build_and_run(self, overrides, stride):
        model = build_model(RunConfig(**overrides), seed=0)
        assert model.stride == stride
        imgs, _ = images_and_targets()
        fused, logits, deltas = model(Tensor(imgs))
        g = 96 // stride
        assert fused.shape == (2, 64, g, g) and logits.shape == (2, 9, g, g)
        assert len(model.anchors) == g * g * 9

    def test_losses_finite_and_all_params_get_gradients(self):
        model = build_model(RunConfig(), seed=0)
        imgs, tg = images_and_targets()
        loss, parts = smr_losses(model, Tensor(imgs), tg, np.random.default_rng(0))
        assert set(parts) == {"rpn_cls", "rpn_reg", "head_cls", "head_reg"}
        loss.backward()
        missing = [n for n, p in model.named_parameters() if p.grad is None]
        assert not missing

    def test_training_reduces_loss_on_fixed_batch(self):
        model = build_model(RunConfig(), seed=1)
        opt = SGD(model.parameters(), 0.005, 0.9, 10.0)
        imgs, tg = images_and_targets(4)
        first = [training_step(model, imgs, tg, opt, np.random.default_rng(0))[0] for _ in range(8)]
        assert first[-1] < first[0]

    def test_empty_targets_skipped(self):
        model = build_model(RunConfig(), seed=0)
        opt = SGD(model.parameters(), 0.005)
        imgs, _ = images_and_targets()
        empty = [Target(np.zeros((0, 4)), np.zeros(0, int))] * 2
        assert training_step(model, imgs, empty, opt, np.random.default_rng(0)) is None

    def test_infer_output_contract(self):
        model = build_model(RunConfig(), seed=0)
        imgs, _ = images_and_targets()
        dets = infer_batch(model, imgs)
        assert len(dets) == 2
        for per_image in dets:
            assert len(per_image) <= DET_MAX
            scores = [d.score for d in per_image]
            assert scores == sorted(scores, reverse=True)
            for d in per_image:
                assert d.class_id in (1, 2) and d.score >= 0.05
                assert 0 <= d.box.x1 < d.box.x2 <= 96 and 0 <= d.box.y1 < d.box.y2 <= 96
            for c in (1, 2):
                same = [d for d in per_image if d.class_id == c]
                for i in range(len(same)):
                    for j in range(i + 1, len(same)):
                        assert iou(same[i].box, same[j].box) <= 0.3

    def test_infer_single_matches_batch(self):
        model = build_model(RunConfig(), seed=0)
        imgs, _ = images_and_targets()
        assert infer(model, imgs[0]) == infer_batch(model, imgs[:1])[0]
        assert EVAL_PROPOSALS.post_nms_count == 100


class TestSgd:
    def test_momentum_update(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.5, clip_norm=100)
        p.grad = np.array([2.0])
        opt.step()
        assert p.data.tolist() == pytest.approx([0.8])
        p.grad = np.array([2.0])
        opt.step()
        assert p.data.tolist() == pytest.approx([0.8 - 0.1 * 3.0])

    def test_clipping(self):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        opt = SGD([p], lr=1.0, momentum=0.0, clip_norm=1.0)
        p.grad = np.array([3.0, 4.0])
        assert opt.step() == pytest.approx(5.0)
        np.testing.assert_allclose(p.data, [-0.6, -0.8])


def test_model_state_roundtrip_bitwise():
    a = build_model(RunConfig(), seed=2)
    b = SMRNet(RunConfig())
    b.load_state(a.state())
    imgs, _ = images_and_targets()
    da, db = infer_batch(a, imgs), infer_batch(b, imgs)
    assert da == db
