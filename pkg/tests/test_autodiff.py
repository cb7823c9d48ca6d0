"""Forward semantics and engine behavior of the autodiff ops."""
import numpy as np
import pytest

from gutseg.autodiff import Tape, Tensor, backward, ops
from gutseg.errors import GutsegError, ShapeError


def t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=grad)


class TestEngine:
    def test_backward_of_sum_is_ones(self, rng):
        x = t(rng.normal(size=(3, 4)), grad=True)
        with Tape():
            backward(ops.reduce_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_backward_of_sum_of_squares(self, rng):
        x = t(rng.normal(size=(5,)), grad=True)
        with Tape():
            backward(ops.reduce_sum(ops.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_gradients_accumulate_across_uses(self):
        x = t([2.0], grad=True)
        with Tape():
            y = ops.add(ops.mul(x, 3.0), ops.mul(x, 4.0))
            backward(ops.reduce_sum(y))
        assert x.grad[0] == pytest.approx(7.0)

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with Tape():
            y = ops.mul(x, 2.0)
            with pytest.raises(ShapeError, match="scalar"):
                backward(y)

    def test_loss_without_tape_rejected(self):
        x = t([1.0], grad=True)
        y = ops.reduce_sum(x)  # no tape active
        with pytest.raises(GutsegError, match="tape"):
            backward(y)

    def test_tape_nodes_in_forward_order(self):
        x = t([1.0], grad=True)
        with Tape() as tape:
            a = ops.mul(x, 2.0)
            b = ops.add(a, 1.0)
            ops.reduce_sum(b)
        assert len(tape.nodes) == 3

    def test_forward_deterministic(self, rng):
        x = np.asarray(rng.normal(size=(2, 3, 8, 8)), dtype=np.float32)
        k = np.asarray(rng.normal(size=(4, 3, 3, 3)), dtype=np.float32)
        a = ops.conv2d(t(x), t(k), padding=1).data
        b = ops.conv2d(t(x), t(k), padding=1).data
        assert np.array_equal(a, b)

    def test_ops_do_not_mutate_inputs(self, rng):
        x = t(rng.normal(size=(2, 2, 4, 4)), grad=True)
        k = t(rng.normal(size=(3, 2, 3, 3)), grad=True)
        xd, kd = x.data.copy(), k.data.copy()
        with Tape():
            y = ops.conv2d(x, k, padding=1)
            z = ops.sigmoid(ops.relu(y))
            backward(ops.mean_all(z))
        assert np.array_equal(x.data, xd)
        assert np.array_equal(k.data, kd)

    def test_float64_passthrough(self):
        x = Tensor(np.ones((2, 2), dtype=np.float64))
        assert ops.mul(x, 2.0).dtype == np.float64

    def test_int_input_becomes_float32(self):
        assert Tensor(np.ones((2, 2), dtype=np.int64)).dtype == np.float32


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
        y = ops.conv2d(t(x), t(np.ones((1, 1, 1, 1))), t(np.zeros(1)))
        assert np.array_equal(y.data, x)

    def test_hand_dot_product(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
        k = t(np.ones((1, 1, 2, 2)))
        y = ops.conv2d(x, k, t(np.zeros(1)))
        assert y.shape == (1, 1, 1, 1)
        assert y.data.reshape(()) == pytest.approx(10.0)

    def test_output_size_formula(self, rng):
        x = t(rng.normal(size=(1, 1, 10, 7)))
        k = t(rng.normal(size=(2, 1, 3, 3)))
        assert ops.conv2d(x, k, stride=2, padding=1).shape == (1, 2, 5, 4)

    def test_bias_broadcasts_per_channel(self):
        x = t(np.zeros((1, 1, 2, 2)))
        k = t(np.zeros((3, 1, 1, 1)))
        y = ops.conv2d(x, k, t([1.0, 2.0, 3.0]))
        assert np.array_equal(y.data[0, :, 0, 0], np.float32([1, 2, 3]))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            ops.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))

    def test_oversized_kernel_rejected(self):
        with pytest.raises(ShapeError, match="larger"):
            ops.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 5, 5))))

    def test_zero_size_dim_rejected(self):
        with pytest.raises(ShapeError, match="zero-size"):
            ops.conv2d(t(np.zeros((1, 1, 0, 4))), t(np.zeros((1, 1, 1, 1))))


class TestConvTranspose2d:
    def test_scatter_by_hand(self):
        x = t(np.full((1, 1, 1, 1), 5.0))
        k = t(np.ones((1, 1, 2, 2)))
        y = ops.conv_transpose2d(x, k, stride=2)
        assert y.shape == (1, 1, 2, 2)
        assert np.array_equal(y.data, np.full((1, 1, 2, 2), 5.0, dtype=np.float32))

    def test_stride1_identity_kernel(self, rng):
        x = np.asarray(rng.normal(size=(2, 3, 4, 4)), dtype=np.float32)
        k = np.zeros((3, 3, 1, 1), dtype=np.float32)
        k[np.arange(3), np.arange(3)] = 1.0
        y = ops.conv_transpose2d(t(x), t(k), stride=1)
        assert np.array_equal(y.data, x)

    def test_output_size_formula(self, rng):
        x = t(rng.normal(size=(1, 4, 5, 3)))
        k = t(rng.normal(size=(4, 2, 2, 2)))
        assert ops.conv_transpose2d(x, k, stride=2).shape == (1, 2, 10, 6)

    def test_adjoint_of_conv2d(self, rng):
        # <conv2d(x, k), y> == <x, conv_transpose2d(y, k)> at padding 0
        for _ in range(5):
            x = np.asarray(rng.normal(size=(2, 3, 6, 6)), dtype=np.float32)
            k = np.asarray(rng.normal(size=(4, 3, 3, 3)), dtype=np.float32)
            for stride in (1, 3):
                fwd = ops.conv2d(t(x), t(k), stride=stride).data
                y = np.asarray(rng.normal(size=fwd.shape), dtype=np.float32)
                adj = ops.conv_transpose2d(t(y), t(k), stride=stride).data
                lhs = float((fwd * y).sum())
                rhs = float((x * adj).sum())
                assert lhs == pytest.approx(rhs, abs=1e-4, rel=1e-4)


class TestMaxpool:
    def test_constant_input(self):
        y = ops.maxpool2d(t(np.full((1, 1, 4, 4), 3.5)))
        assert np.array_equal(y.data, np.full((1, 1, 2, 2), 3.5, dtype=np.float32))

    def test_hand_window_and_gradient_routing(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]], grad=True)
        with Tape():
            y = ops.maxpool2d(x)
            assert y.data.reshape(()) == pytest.approx(4.0)
            backward(ops.reduce_sum(y))
        expected = np.zeros((1, 1, 2, 2), dtype=np.float32)
        expected[0, 0, 1, 1] = 1.0
        assert np.array_equal(x.grad, expected)

    def test_tie_goes_to_first_in_scan_order(self):
        x = t(np.full((1, 1, 2, 2), 7.0), grad=True)
        with Tape():
            backward(ops.reduce_sum(ops.maxpool2d(x)))
        expected = np.zeros((1, 1, 2, 2), dtype=np.float32)
        expected[0, 0, 0, 0] = 1.0
        assert np.array_equal(x.grad, expected)

    def test_commutes_with_horizontal_flip(self, rng):
        x = np.asarray(rng.normal(size=(2, 3, 8, 8)), dtype=np.float32)
        a = ops.maxpool2d(t(x[..., ::-1].copy())).data
        b = ops.maxpool2d(t(x)).data[..., ::-1]
        assert np.array_equal(a, b)

    def test_odd_dims_rejected_with_guidance(self):
        with pytest.raises(ShapeError, match="pad"):
            ops.maxpool2d(t(np.zeros((1, 1, 3, 4))))


class TestElementwise:
    def test_sigmoid_of_zero(self):
        assert ops.sigmoid(t([0.0])).data[0] == pytest.approx(0.5)

    def test_sigmoid_stable_at_extremes(self):
        y = ops.sigmoid(t([-100.0, 100.0])).data
        assert y[0] == pytest.approx(0.0, abs=1e-30)
        assert y[1] == pytest.approx(1.0)

    def test_relu_kills_negatives(self, rng):
        x = np.abs(rng.normal(size=20)).astype(np.float32) + 0.1
        assert not ops.relu(t(-x)).data.any()

    def test_clamp_bounds_and_gradient_mask(self):
        x = t([-1.0, 0.5, 2.0], grad=True)
        with Tape():
            y = ops.clamp(x, 0.0, 1.0)
            backward(ops.reduce_sum(y))
        assert np.array_equal(y.data, np.float32([0.0, 0.5, 1.0]))
        assert np.array_equal(x.grad, np.float32([0.0, 1.0, 0.0]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ops.add(t(np.zeros(3)), t(np.zeros(4)))

    def test_reduce_sum_axes(self, rng):
        x = np.asarray(rng.normal(size=(2, 3, 4, 5)), dtype=np.float32)
        y = ops.reduce_sum(t(x), axes=(2, 3))
        np.testing.assert_allclose(y.data, x.sum(axis=(2, 3)), rtol=1e-6)


class TestConcat:
    def test_channel_counts_and_content_preserved(self, rng):
        a = np.asarray(rng.normal(size=(2, 2, 4, 4)), dtype=np.float32)
        b = np.asarray(rng.normal(size=(2, 3, 4, 4)), dtype=np.float32)
        y = ops.concat_channels(t(a), t(b))
        assert y.shape == (2, 5, 4, 4)
        assert np.array_equal(y.data[:, :2], a)
        assert np.array_equal(y.data[:, 2:], b)

    def test_backward_splits_gradient(self, rng):
        a = t(np.asarray(rng.normal(size=(1, 2, 2, 2)), dtype=np.float32), grad=True)
        b = t(np.asarray(rng.normal(size=(1, 1, 2, 2)), dtype=np.float32), grad=True)
        w = np.arange(12, dtype=np.float32).reshape(1, 3, 2, 2)
        with Tape():
            y = ops.concat_channels(a, b)
            backward(ops.reduce_sum(ops.mul(y, t(w))))
        assert np.array_equal(a.grad, w[:, :2])
        assert np.array_equal(b.grad, w[:, 2:])

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ops.concat_channels(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 2, 2))))


class TestBatchnorm:
    def test_training_normalizes_batch(self, rng):
        x = np.asarray(rng.normal(2.0, 3.0, size=(4, 2, 8, 8)), dtype=np.float32)
        stats = ops.RunningStats.create(2)
        y = ops.batchnorm2d(t(x), t(np.ones(2)), t(np.zeros(2)), stats, training=True)
        assert abs(float(y.data.mean())) < 1e-5
        assert float(y.data.std()) == pytest.approx(1.0, abs=1e-3)

    def test_eval_uses_running_stats(self):
        stats = ops.RunningStats.create(1)
        stats.mean[:] = 5.0
        stats.var[:] = 4.0
        x = t(np.full((1, 1, 2, 2), 7.0))
        y = ops.batchnorm2d(x, t(np.ones(1)), t(np.zeros(1)), stats, training=False)
        assert y.data[0, 0, 0, 0] == pytest.approx((7.0 - 5.0) / np.sqrt(4.0 + 1e-5))

    def test_training_updates_running_stats(self, rng):
        x = np.asarray(rng.normal(1.0, 2.0, size=(8, 1, 16, 16)), dtype=np.float32)
        stats = ops.RunningStats.create(1)
        ops.batchnorm2d(t(x), t(np.ones(1)), t(np.zeros(1)), stats, training=True)
        assert stats.mean[0] == pytest.approx(0.1 * x.mean(), rel=1e-3)
