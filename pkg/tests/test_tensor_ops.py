import unittest

import numpy as np

from fedseg.errors import NonFiniteError, ShapeMismatchError
from fedseg.tensor_ops import (
    check_finite, concat_channels, conv2d, conv2d_grad, maxpool2, maxpool2_grad,
    relu, relu_grad, sigmoid, sigmoid_grad, split_grad, upsample2, upsample2_grad,
)


def _loss(x, w, b, g):
    return float(np.sum(conv2d(x, w, b) * g))


def _numeric_partials(fn, x, indices, eps=1e-6):
    """Central differences of scalar ``fn`` at flat ``indices`` of ``x``."""
    partials = []
    for flat in indices:
        index = np.unravel_index(flat, x.shape)
        plus, minus = x.copy(), x.copy()
        plus[index] += eps
        minus[index] -= eps
        partials.append((fn(plus) - fn(minus)) / (2 * eps))
    return np.array(partials)


def _coordinates(rng, tensor, count=100):
    return rng.choice(tensor.size, size=min(count, tensor.size), replace=False)


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + gap, x - gap)


class ConvolutionTests(unittest.TestCase):
    def test_centre_tap_kernel_is_identity(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0

        out = conv2d(x, w, np.zeros(1, dtype=np.float32))

        np.testing.assert_array_equal(out, x)
        self.assertEqual(out.dtype, np.float32)

    def test_ones_kernel_counts_neighbours_with_zero_padding(self):
        x = np.ones((1, 3, 3), dtype=np.float64)
        w = np.ones((1, 1, 3, 3), dtype=np.float64)

        out = conv2d(x, w, np.array([0.5]))

        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float64) + 0.5
        np.testing.assert_array_equal(out[0], expected)

    def test_batched_input_matches_single_images(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)

        batched = conv2d(x, w, b)

        self.assertEqual(batched.shape, (2, 3, 5, 6))
        np.testing.assert_allclose(batched[1], conv2d(x[1], w, b), rtol=1e-12)

    def test_channel_mismatch_raises(self):
        with self.assertRaises(ShapeMismatchError):
            conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_bias_shape_mismatch_raises(self):
        with self.assertRaises(ShapeMismatchError):
            conv2d(np.zeros((1, 4, 4)), np.zeros((2, 1, 3, 3)), np.zeros(3))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        g = rng.normal(size=(2, 4, 5, 6))

        grads = conv2d_grad(x, w, g)

        picks = _coordinates(rng, w)
        numeric = _numeric_partials(lambda v: _loss(x, v, b, g), w, picks)
        np.testing.assert_allclose(grads.weight_grad.ravel()[picks], numeric, atol=1e-5)
        picks = _coordinates(rng, x)
        numeric = _numeric_partials(lambda v: _loss(v, w, b, g), x, picks)
        np.testing.assert_allclose(grads.input_grad.ravel()[picks], numeric, atol=1e-5)
        numeric = _numeric_partials(lambda v: _loss(x, w, v, g), b, range(b.size))
        np.testing.assert_allclose(grads.bias_grad, numeric, atol=1e-5)
        np.testing.assert_allclose(grads.bias_grad, g.sum(axis=(0, 2, 3)), rtol=1e-12)


class ActivationTests(unittest.TestCase):
    def test_relu_gradient_is_zero_at_zero(self):
        x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)

        np.testing.assert_array_equal(relu(x), [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu_grad(x, np.ones(3, dtype=np.float32)), [0.0, 0.0, 1.0])

    def test_relu_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        x = _away_from_zero(rng, (2, 3, 6, 6))
        g = rng.normal(size=x.shape)
        picks = _coordinates(rng, x)

        numeric = _numeric_partials(lambda v: float(np.sum(relu(v) * g)), x, picks)

        np.testing.assert_allclose(relu_grad(x, g).ravel()[picks], numeric, atol=1e-6)

    def test_sigmoid_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(22)
        x = rng.normal(scale=3.0, size=(2, 3, 6, 6))
        g = rng.normal(size=x.shape)
        picks = _coordinates(rng, x)

        numeric = _numeric_partials(lambda v: float(np.sum(sigmoid(v) * g)), x, picks)

        np.testing.assert_allclose(sigmoid_grad(sigmoid(x), g).ravel()[picks], numeric, atol=1e-6)

    def test_sigmoid_saturates_without_overflow(self):
        y = sigmoid(np.array([-1000.0, 0.0, 1000.0]))

        np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])

    def test_sigmoid_grad_peaks_at_half(self):
        y = sigmoid(np.array([0.0], dtype=np.float32))

        self.assertAlmostEqual(float(sigmoid_grad(y, np.ones(1, dtype=np.float32))[0]), 0.25)


class PoolingTests(unittest.TestCase):
    def test_maxpool_ties_pick_lowest_index(self):
        x = np.full((1, 2, 2), 3.0)

        pooled, indices = maxpool2(x)

        self.assertEqual(pooled[0, 0, 0], 3.0)
        self.assertEqual(indices[0, 0, 0], 0)

    def test_maxpool_grad_routes_to_winner(self):
        x = np.array([[[1.0, 5.0], [2.0, 0.0]]])

        pooled, indices = maxpool2(x)
        grad = maxpool2_grad(indices, np.array([[[7.0]]]))

        self.assertEqual(pooled[0, 0, 0], 5.0)
        np.testing.assert_array_equal(grad, [[[0.0, 7.0], [0.0, 0.0]]])

    def test_maxpool_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        # distinct values 0.01 apart keep every window's winner stable under the step
        x = rng.permutation(2 * 3 * 6 * 8).reshape(2, 3, 6, 8) * 0.01
        g = rng.normal(size=(2, 3, 3, 4))
        _, indices = maxpool2(x)
        picks = _coordinates(rng, x)

        numeric = _numeric_partials(lambda v: float(np.sum(maxpool2(v)[0] * g)), x, picks)

        np.testing.assert_allclose(maxpool2_grad(indices, g).ravel()[picks], numeric, atol=1e-6)

    def test_maxpool_gradient_is_conserved(self):
        rng = np.random.default_rng(24)
        for _ in range(50):
            x = rng.normal(size=(2, 2, 4, 6))
            g = rng.normal(size=(2, 2, 2, 3))
            _, indices = maxpool2(x)

            grad = maxpool2_grad(indices, g)

            self.assertAlmostEqual(float(grad.sum()), float(g.sum()), places=10)
            windows = (grad != 0).reshape(2, 2, 2, 2, 3, 2).sum(axis=(3, 5))
            self.assertTrue(np.all(windows <= 1))

    def test_upsample_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(25)
        x = rng.normal(size=(2, 3, 5, 4))
        g = rng.normal(size=(2, 3, 10, 8))
        picks = _coordinates(rng, x)

        numeric = _numeric_partials(lambda v: float(np.sum(upsample2(v) * g)), x, picks)

        np.testing.assert_allclose(upsample2_grad(g).ravel()[picks], numeric, atol=1e-6)

    def test_odd_dims_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            maxpool2(np.zeros((1, 3, 4)))

    def test_upsample_grad_sums_blocks(self):
        x = np.arange(4, dtype=np.float32).reshape(1, 2, 2)

        up = upsample2(x)
        grad = upsample2_grad(np.ones_like(up))

        self.assertEqual(up.shape, (1, 4, 4))
        np.testing.assert_array_equal(grad, np.full((1, 2, 2), 4.0, dtype=np.float32))


class ChannelTests(unittest.TestCase):
    def test_split_grad_inverts_concat(self):
        a = np.ones((2, 1, 2, 2))
        b = np.zeros((2, 3, 2, 2))

        left, right = split_grad(concat_channels(a, b), 1)

        np.testing.assert_array_equal(left, a)
        np.testing.assert_array_equal(right, b)

    def test_split_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(26)
        a = rng.normal(size=(2, 2, 4, 4))
        b = rng.normal(size=(2, 3, 4, 4))
        g = rng.normal(size=(2, 5, 4, 4))

        grad_a, grad_b = split_grad(g, 2)

        numeric_a = _numeric_partials(lambda v: float(np.sum(concat_channels(v, b) * g)), a, range(a.size))
        numeric_b = _numeric_partials(lambda v: float(np.sum(concat_channels(a, v) * g)), b, range(b.size))
        np.testing.assert_allclose(grad_a.ravel(), numeric_a, atol=1e-6)
        np.testing.assert_allclose(grad_b.ravel(), numeric_b, atol=1e-6)

    def test_concat_then_split_returns_inputs_exactly(self):
        rng = np.random.default_rng(27)
        for _ in range(20):
            a = rng.normal(size=(1, int(rng.integers(1, 4)), 3, 5)).astype(np.float32)
            b = rng.normal(size=(1, int(rng.integers(1, 4)), 3, 5)).astype(np.float32)

            left, right = split_grad(concat_channels(a, b), a.shape[1])

            np.testing.assert_array_equal(left, a)
            np.testing.assert_array_equal(right, b)

    def test_check_finite_rejects_nan(self):
        with self.assertRaises(NonFiniteError):
            check_finite(np.array([1.0, np.nan]))


if __name__ == '__main__':
    unittest.main()
