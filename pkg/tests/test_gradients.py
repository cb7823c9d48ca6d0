"""Finite-difference oracles for every differentiable operator.

Analytic gradients come from the float32 engine; the reference is a
64-bit central difference (step 1e-3). Pass criterion per element:
max(1e-3 absolute, 1e-2 relative).
"""
import numpy as np
import pytest

from gutseg.autodiff import Tensor, ops
from gutseg.autodiff.gradcheck import check_gradients
from gutseg.losses import LossKind, bce, combined_loss, iou_soft, tversky_loss


def weighted_sum(out: Tensor, seed: int) -> Tensor:
    """Reduce a non-scalar op output with fixed random weights so every
    output element's gradient participates in the check."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ops.reduce_sum(ops.mul(out, Tensor(w.astype(out.dtype))))


def uniform(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def away_from_kinks(arr, margin=0.02):
    """Nudge values off 0 so relu/maxpool stay locally linear under the
    finite-difference step."""
    out = np.array(arr)
    small = np.abs(out) < margin
    out[small] = out[small] + np.where(out[small] >= 0, 0.05, -0.05)
    return out


class TestConvGradients:
    def test_conv2d_random_configs(self):
        rng = np.random.default_rng(10)
        x = uniform(rng, (1, 2, 5, 5))
        k = uniform(rng, (3, 2, 3, 3))
        b = uniform(rng, (3,))
        check_gradients(
            lambda ts: weighted_sum(ops.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1), 0),
            [x, k, b])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0)])
    def test_conv2d_strided_padded(self, stride, padding):
        rng = np.random.default_rng(stride * 7 + padding)
        x = uniform(rng, (2, 2, 6, 6))
        k = uniform(rng, (2, 2, 3, 3))
        b = uniform(rng, (2,))
        check_gradients(
            lambda ts: weighted_sum(
                ops.conv2d(ts[0], ts[1], ts[2], stride=stride, padding=padding), 1),
            [x, k, b])

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_transpose2d(self, stride):
        rng = np.random.default_rng(20 + stride)
        x = uniform(rng, (2, 3, 4, 4))
        k = uniform(rng, (3, 2, 2, 2))
        check_gradients(
            lambda ts: weighted_sum(ops.conv_transpose2d(ts[0], ts[1], stride=stride), 2),
            [x, k])

    def test_depthwise_conv2d(self):
        rng = np.random.default_rng(31)
        x = uniform(rng, (2, 3, 5, 5))
        k = uniform(rng, (3, 1, 3, 3))
        b = uniform(rng, (3,))
        check_gradients(
            lambda ts: weighted_sum(ops.depthwise_conv2d(ts[0], ts[1], ts[2]), 3),
            [x, k, b])


class TestPoolActivationGradients:
    def test_maxpool2d(self):
        rng = np.random.default_rng(40)
        # well-separated values so the argmax is stable under the step
        x = away_from_kinks(uniform(rng, (2, 2, 6, 6)))
        x += np.arange(x.size).reshape(x.shape) * 1e-2
        check_gradients(lambda ts: weighted_sum(ops.maxpool2d(ts[0]), 4), [x])

    def test_relu(self):
        rng = np.random.default_rng(41)
        x = away_from_kinks(uniform(rng, (3, 7)))
        check_gradients(lambda ts: weighted_sum(ops.relu(ts[0]), 5), [x])

    def test_sigmoid(self):
        rng = np.random.default_rng(42)
        check_gradients(lambda ts: weighted_sum(ops.sigmoid(ts[0]), 6),
                        [uniform(rng, (3, 7))])

    def test_concat_channels(self):
        rng = np.random.default_rng(43)
        a = uniform(rng, (2, 2, 3, 3))
        b = uniform(rng, (2, 3, 3, 3))
        check_gradients(
            lambda ts: weighted_sum(ops.concat_channels(ts[0], ts[1]), 7), [a, b])


class TestBatchnormGradients:
    def test_training_mode(self):
        rng = np.random.default_rng(50)
        x = uniform(rng, (3, 2, 4, 4))
        gamma = uniform(rng, (2,), 0.5, 1.5)
        beta = uniform(rng, (2,), -0.5, 0.5)

        def fn(ts):
            stats = ops.RunningStats.create(2)
            return weighted_sum(
                ops.batchnorm2d(ts[0], ts[1], ts[2], stats, training=True), 8)

        check_gradients(fn, [x, gamma, beta])

    def test_eval_mode(self):
        rng = np.random.default_rng(51)
        x = uniform(rng, (2, 3, 4, 4))
        gamma = uniform(rng, (3,), 0.5, 1.5)
        beta = uniform(rng, (3,), -0.5, 0.5)
        stats = ops.RunningStats.create(3)
        stats.mean[:] = rng.normal(size=3)
        stats.var[:] = rng.uniform(0.5, 2.0, size=3)

        def fn(ts):
            return weighted_sum(
                ops.batchnorm2d(ts[0], ts[1], ts[2], stats, training=False), 9)

        check_gradients(fn, [x, gamma, beta])


class TestLossGradients:
    def probs_truth(self, seed, shape=(2, 3, 4, 4)):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0.05, 0.95, size=shape)
        truth = (rng.random(shape) > 0.5).astype(np.float64)
        return pred, truth

    def test_iou_soft(self):
        pred, truth = self.probs_truth(60)
        check_gradients(
            lambda ts: iou_soft(ts[0], Tensor(truth.astype(ts[0].dtype))), [pred])

    def test_bce(self):
        pred, truth = self.probs_truth(61)
        check_gradients(
            lambda ts: bce(ts[0], Tensor(truth.astype(ts[0].dtype))), [pred])

    def test_tversky(self):
        pred, truth = self.probs_truth(62)
        check_gradients(
            lambda ts: tversky_loss(ts[0], Tensor(truth.astype(ts[0].dtype)),
                                    alpha=0.3, beta=0.7), [pred])

    @pytest.mark.parametrize("tag", ["iou", "bce_tversky", "iou_tversky"])
    def test_combined(self, tag):
        pred, truth = self.probs_truth(63)
        kind = LossKind(tag)
        check_gradients(
            lambda ts: combined_loss(kind, ts[0], Tensor(truth.astype(ts[0].dtype))),
            [pred])
