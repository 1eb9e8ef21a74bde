import unittest

import numpy as np

from fedseg.errors import ConfigError, NonFiniteError, ShapeMismatchError
from fedseg.optim import AdamState, adam_step, sgd_step
from fedseg.params import ModelParams


def _single(value, dtype=np.float64):
    return ModelParams([('w', np.array([value], dtype=dtype))])


class AdamTests(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self):
        state = AdamState(learning_rate=0.1, l2_lambda=0.0)

        updated = adam_step(_single(1.0), _single(0.5), state)

        # m_hat = g and v_hat = g^2 after bias correction
        self.assertAlmostEqual(float(updated['w'][0]), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), places=12)
        self.assertEqual(state.step_count, 1)

    def test_two_steps_match_hand_computation(self):
        state = AdamState(learning_rate=0.01, l2_lambda=0.1)
        p, g1, g2 = 2.0, 0.3, -0.2

        params = adam_step(_single(p), _single(g1), state)
        params = adam_step(params, _single(g2), state)

        e1 = g1 + 0.1 * p
        m, v = 0.1 * e1, 0.001 * e1 * e1
        p1 = p - 0.01 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        e2 = g2 + 0.1 * p1
        m = 0.9 * m + 0.1 * e2
        v = 0.999 * v + 0.001 * e2 * e2
        p2 = p1 - 0.01 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        self.assertAlmostEqual(float(params['w'][0]), p2, places=12)

    def test_zero_learning_rate_is_bit_exact_no_op(self):
        params = ModelParams([('w', np.array([0.25, -3.0], dtype=np.float32))])
        grads = ModelParams([('w', np.array([10.0, 1e-3], dtype=np.float32))])

        updated = adam_step(params, grads, AdamState(learning_rate=0.0))

        self.assertTrue(updated.bit_equal(params))

    def test_rejected_gradient_leaves_state_untouched(self):
        state = AdamState(learning_rate=0.1)
        adam_step(_single(1.0), _single(0.5), state)
        first = state.first_moment

        with self.assertRaises(NonFiniteError):
            adam_step(_single(1.0), _single(np.nan), state)

        self.assertEqual(state.step_count, 1)
        self.assertIs(state.first_moment, first)

    def test_layout_mismatch_raises(self):
        with self.assertRaises(ShapeMismatchError):
            adam_step(_single(1.0), ModelParams([('other', np.zeros(1))]), AdamState())

    def test_invalid_hyper_parameters(self):
        with self.assertRaises(ConfigError):
            AdamState(learning_rate=-1.0)
        with self.assertRaises(ConfigError):
            AdamState(beta1=1.0)

    def test_reset_clears_moments(self):
        state = AdamState(learning_rate=0.1)
        adam_step(_single(1.0), _single(0.5), state)

        state.reset()

        self.assertIsNone(state.first_moment)
        self.assertEqual(state.step_count, 0)


class SgdTests(unittest.TestCase):
    def test_sgd_step_with_l2(self):
        updated = sgd_step(_single(2.0), _single(1.0), learning_rate=0.5, l2_lambda=0.1)

        self.assertAlmostEqual(float(updated['w'][0]), 2.0 - 0.5 * (1.0 + 0.2))


if __name__ == '__main__':
    unittest.main()
