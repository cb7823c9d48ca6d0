import math

import numpy as np
import pytest

from gutseg.autodiff import Tensor, ops
from gutseg.errors import ConfigError, ShapeError
from gutseg.losses import (LossKind, MetricReport, bce, combined_loss,
                           iou_hard, iou_soft, threshold, tversky_loss)


def brute_force_iou(a, b):
    """Independent pixel-counting oracle (plain Python loops)."""
    inter = union = 0
    for av, bv in zip(np.asarray(a, dtype=bool).reshape(-1),
                      np.asarray(b, dtype=bool).reshape(-1)):
        if av and bv:
            inter += 1
        if av or bv:
            union += 1
    return 1.0 if union == 0 else inter / union


class TestIouHard:
    def test_identical_nonempty(self, rng):
        m = rng.random((8, 8)) > 0.5
        m[0, 0] = True
        assert iou_hard(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = b[3, 3] = True
        assert iou_hard(a, b) == 0.0

    def test_counted_by_hand(self):
        a = np.zeros((3, 4), dtype=bool)
        b = np.zeros((3, 4), dtype=bool)
        a.reshape(-1)[:4] = True          # |A| = 4
        b.reshape(-1)[2:6] = True         # |B| = 4, overlap 2
        assert iou_hard(a, b) == pytest.approx(2 / 6)

    def test_both_empty_is_one(self):
        z = np.zeros((5, 5), dtype=bool)
        assert iou_hard(z, z) == 1.0

    def test_symmetric_and_bounded(self, rng):
        for _ in range(50):
            a = rng.random((6, 6)) > rng.random()
            b = rng.random((6, 6)) > rng.random()
            v = iou_hard(a, b)
            assert v == iou_hard(b, a)
            assert 0.0 <= v <= 1.0

    def test_matches_brute_force_exactly(self, rng):
        for _ in range(200):
            h, w = int(rng.integers(1, 33)), int(rng.integers(1, 33))
            a = rng.random((h, w)) > rng.random()
            b = rng.random((h, w)) > rng.random()
            assert iou_hard(a, b) == brute_force_iou(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            iou_hard(np.zeros((2, 2), dtype=bool), np.zeros((2, 3), dtype=bool))


class TestIouSoft:
    def test_perfect_prediction_is_one(self, rng):
        truth = (rng.random((4, 4)) > 0.5).astype(np.float32)
        v = iou_soft(Tensor(truth), Tensor(truth)).item()
        assert v == pytest.approx(1.0, abs=1e-5)

    def test_half_probabilities_closed_form(self):
        pred = np.full((2, 2), 0.5, dtype=np.float32)
        truth = np.zeros((2, 2), dtype=np.float32)
        truth[0] = 1.0  # sum t = 2, sum p = 2, sum p*t = 1 -> 1/3
        v = iou_soft(Tensor(pred), Tensor(truth), eps=1e-9).item()
        assert v == pytest.approx(1 / 3, abs=1e-6)

    def test_close_to_hard_on_binary(self, rng):
        for eps in (1.0, 0.1):
            a = rng.random((8, 8)) > 0.4
            b = rng.random((8, 8)) > 0.4
            union = np.logical_or(a, b).sum()
            soft = iou_soft(Tensor(a.astype(np.float32)),
                            Tensor(b.astype(np.float32)), eps=eps).item()
            assert abs(soft - iou_hard(a, b)) <= eps / union + 1e-6


class TestBce:
    def test_half_everywhere_is_ln2(self, rng):
        pred = np.full((3, 5), 0.5, dtype=np.float32)
        for truth in (np.zeros((3, 5)), np.ones((3, 5)), rng.random((3, 5)) > 0.5):
            v = bce(Tensor(pred), Tensor(truth.astype(np.float32))).item()
            assert v == pytest.approx(math.log(2), rel=1e-6)

    def test_perfect_prediction_at_clamp_floor(self, rng):
        truth = (rng.random((4, 4)) > 0.5).astype(np.float32)
        v = bce(Tensor(truth), Tensor(truth)).item()
        # float32 quantizes 1 - 1e-7 to 1 - 2**-23, so the floor is ~1.2e-7
        assert 0 < v <= -math.log(1 - 2 ** -23) * 1.01

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


class TestTversky:
    def test_vanishes_at_perfect_prediction(self, rng):
        truth = (rng.random((2, 3, 4, 4)) > 0.5).astype(np.float32)
        v = tversky_loss(Tensor(truth), Tensor(truth)).item()
        assert v == pytest.approx(0.0, abs=1e-6)

    def test_symmetric_point_equals_soft_dice(self, rng):
        # dice = 2*TP / (2*TP + FP + FN); tversky(0.5, 0.5) matches it
        for _ in range(10):
            pred = rng.uniform(0.01, 0.99, size=(2, 3, 6, 6)).astype(np.float64)
            truth = (rng.random((2, 3, 6, 6)) > 0.5).astype(np.float64)
            eps = 1.0
            tp = (pred * truth).sum(axis=(2, 3))
            fp = (pred * (1 - truth)).sum(axis=(2, 3))
            fn = ((1 - pred) * truth).sum(axis=(2, 3))
            dice_loss = float(np.mean(1 - (2 * tp + 2 * eps) / (2 * tp + fp + fn + 2 * eps)))
            tv = tversky_loss(Tensor(pred), Tensor(truth), 0.5, 0.5, eps).item()
            assert tv == pytest.approx(dice_loss, abs=1e-6)

    def test_alpha_weighs_false_positives(self):
        pred = np.array([[1.0, 1.0], [0.0, 0.0]], dtype=np.float32)
        truth = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
        hard_on_fp = tversky_loss(Tensor(pred), Tensor(truth), 0.9, 0.1, 1e-6).item()
        soft_on_fp = tversky_loss(Tensor(pred), Tensor(truth), 0.1, 0.9, 1e-6).item()
        assert hard_on_fp > soft_on_fp


class TestCombined:
    def test_vanishes_at_perfect_prediction(self, rng):
        truth = (rng.random((1, 3, 8, 8)) > 0.5).astype(np.float32)
        v = combined_loss(LossKind("bce_tversky"), Tensor(truth), Tensor(truth)).item()
        assert v < 1e-6

    @pytest.mark.parametrize("tag", ["bce_tversky", "iou_tversky"])
    def test_linearity_reassembly_bitwise(self, tag, rng):
        kind = LossKind(tag)
        pred = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 4, 4)).astype(np.float32))
        truth = Tensor((rng.random((2, 3, 4, 4)) > 0.5).astype(np.float32))
        whole = combined_loss(kind, pred, truth).item()
        tv = tversky_loss(pred, truth, kind.tversky_alpha, kind.tversky_beta,
                          kind.smooth_eps)
        if tag == "bce_tversky":
            other = bce(pred, truth)
        else:
            other = ops.sub(1.0, iou_soft(pred, truth, kind.smooth_eps))
        reassembled = ops.add(ops.mul(tv, 0.4), ops.mul(other, 0.6)).item()
        assert whole == reassembled  # identical op sequence -> identical floats

    def test_iou_loss_is_one_minus_soft_iou(self, rng):
        pred = Tensor(rng.uniform(0.1, 0.9, size=(3, 5)).astype(np.float32))
        truth = Tensor((rng.random((3, 5)) > 0.5).astype(np.float32))
        a = combined_loss(LossKind("iou"), pred, truth).item()
        b = 1.0 - iou_soft(pred, truth, 1.0).item()
        assert a == pytest.approx(b, abs=1e-7)

    def test_half_probs_scalar_oracle(self):
        # independent scalar recomputation of 0.4 * tversky + 0.6 * ln 2
        pred = np.full((2, 2), 0.5, dtype=np.float32)
        truth = np.zeros((2, 2), dtype=np.float32)
        truth[0] = 1.0
        eps = 1.0
        tp, fp, fn = 1.0, 1.0, 1.0
        tversky_term = 1.0 - (tp + eps) / (tp + 0.5 * fp + 0.5 * fn + eps)
        expected = 0.4 * tversky_term + 0.6 * math.log(2)
        got = combined_loss(LossKind("bce_tversky"),
                            Tensor(pred), Tensor(truth)).item()
        assert got == pytest.approx(expected, rel=1e-5)

    def test_unknown_tag_rejected(self):
        with pytest.raises(ConfigError):
            LossKind("focal")

    def test_negative_alpha_rejected(self):
        with pytest.raises(ConfigError):
            LossKind("iou", tversky_alpha=-0.1)


class TestThreshold:
    def test_boundary_goes_to_one(self):
        assert threshold(np.array([0.5]))[0]

    def test_below_boundary_goes_to_zero(self):
        assert not threshold(np.array([0.49]))[0]

    def test_idempotent(self, rng):
        probs = rng.random((6, 6)).astype(np.float32)
        once = threshold(probs)
        again = threshold(once.astype(np.float32))
        assert np.array_equal(once, again)

    def test_accepts_tensor(self):
        assert threshold(Tensor(np.array([0.7])))[0]


class TestMetricReport:
    def test_mean_is_arithmetic_mean(self):
        r = MetricReport.from_per_class((0.2, 0.4, 0.9), epoch=3, split="train")
        assert r.mean_iou == pytest.approx((0.2 + 0.4 + 0.9) / 3)
        assert r.epoch == 3 and r.split == "train"
