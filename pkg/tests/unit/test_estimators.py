#!/usr/bin/env python3

import unittest
import sys
from pathlib import Path

import numpy as np

# Add project root to Python path
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from blora.common import ConfigurationError, fro_sq
from blora.estimators import advance, estimator_gap, init_estimator
from blora.logs import setup_logging
from blora.problems import make_problem

logger = setup_logging(verbose=True).getChild('test.estimators')


class TestEstimators(unittest.TestCase):
    """Single-node gradient estimators"""

    def setUp(self):
        self.problem = make_problem("quadratic-pl", {"shape": (2, 2), "rows": 8, "residual": 1.0,
                                                     "mu": 0.5, "L": 1.0, "seed": 4})
        self.rng = np.random.default_rng(0)
        self.W0 = self.rng.standard_normal((2, 2))
        self.W1 = self.W0 - 0.1 * self.problem.grad(self.W0)

    def test_initial_state(self):
        """G^0 defaults to the full gradient with a zero gap"""
        state = init_estimator("page", {"q": 0.5}, self.problem, self.W0)
        np.testing.assert_array_equal(state.G, self.problem.grad(self.W0))
        self.assertEqual(state.initial_gap, 0.0)
        custom = init_estimator("sgd", {}, self.problem, self.W0, G0=np.zeros((2, 2)))
        self.assertAlmostEqual(custom.initial_gap, float(np.sum(self.problem.grad(self.W0) ** 2)))

    def test_gd_tracks_gradient(self):
        """GD keeps G equal to the full gradient"""
        state = init_estimator("gd", None, self.problem, self.W0)
        advance(state, self.W1, self.W0, self.problem, self.rng)
        np.testing.assert_array_equal(state.G, self.problem.grad(self.W1))
        self.assertEqual(estimator_gap(state, self.problem, self.W1), 0.0)

    def test_sgd_full_batch(self):
        """SGD with the whole data set as batch is the full gradient"""
        state = init_estimator("sgd", {"batch_size": 8}, self.problem, self.W0)
        advance(state, self.W1, self.W0, self.problem, self.rng)
        np.testing.assert_allclose(state.G, self.problem.grad(self.W1), rtol=1e-10, atol=1e-12)

    def test_sgd_uses_one_sample(self):
        """SGD with batch 1 returns the gradient of the drawn sample"""
        state = init_estimator("sgd", {"batch_size": 1}, self.problem, self.W0)
        advance(state, self.W1, self.W0, self.problem, self.rng)
        (index,) = state.last_indices
        np.testing.assert_allclose(state.G, self.problem.sample_grad(self.W1, index), rtol=1e-12)

    def test_mvr_update(self):
        """MVR mixes the new sample gradient with the corrected old estimator"""
        state = init_estimator("mvr", {"b": 0.3}, self.problem, self.W0)
        G_old = state.G.copy()
        advance(state, self.W1, self.W0, self.problem, self.rng)
        (i,) = state.last_indices
        expected = (self.problem.sample_grad(self.W1, i)
                    + 0.7 * (G_old - self.problem.sample_grad(self.W0, i)))
        np.testing.assert_allclose(state.G, expected, rtol=1e-12, atol=1e-12)
        self.assertFalse(state.sgd_equivalent)
        self.assertTrue(init_estimator("mvr", {"b": 1.0}, self.problem, self.W0).sgd_equivalent)

    def test_page_coin(self):
        """PAGE recomputes the gradient on heads and adds a gradient difference on tails"""
        state = init_estimator("page", {"q": 0.5}, self.problem, self.W0)
        advance(state, self.W1, self.W0, self.problem, self.rng, force_coin=True)
        np.testing.assert_array_equal(state.G, self.problem.grad(self.W1))
        self.assertTrue(state.last_coin)
        self.assertEqual(state.full_gradient_updates, 1)
        W2 = self.W1 - 0.1 * state.G
        G_old = state.G.copy()
        advance(state, W2, self.W1, self.problem, self.rng, force_coin=False)
        (i,) = state.last_indices
        expected = G_old + self.problem.sample_grad(W2, i) - self.problem.sample_grad(self.W1, i)
        np.testing.assert_allclose(state.G, expected, rtol=1e-12, atol=1e-12)
        self.assertFalse(state.last_coin)

    def test_page_unbiased_given_past(self):
        """The PAGE gap stays zero in expectation when it starts at zero"""
        gaps = []
        for seed in range(400):
            state = init_estimator("page", {"q": 0.5}, self.problem, self.W0)
            advance(state, self.W1, self.W0, self.problem, np.random.default_rng(seed))
            gaps.append(state.G - self.problem.grad(self.W1))
        scale = np.linalg.norm(self.problem.grad(self.W1)) + 1.0
        self.assertLess(np.max(np.abs(np.mean(gaps, axis=0))), 0.25 * scale)

    def test_invalid_parameters(self):
        """Missing or out-of-range parameters are rejected"""
        with self.assertRaises(ConfigurationError):
            init_estimator("mvr", {}, self.problem, self.W0)
        with self.assertRaises(ConfigurationError):
            init_estimator("mvr", {"b": 0.0}, self.problem, self.W0)
        with self.assertRaises(ConfigurationError):
            init_estimator("page", {"q": 1.5}, self.problem, self.W0)
        with self.assertRaises(ConfigurationError):
            init_estimator("sgd", {"batch_size": 9}, self.problem, self.W0)
        with self.assertRaises(ConfigurationError):
            init_estimator("adam", {}, self.problem, self.W0)


class TestEstimatorStatistics(unittest.TestCase):
    """Expected behaviour of the stochastic estimators on averages over seeds"""

    seeds = 200

    def setUp(self):
        self.problem = make_problem("quadratic-pl", {"shape": (2, 2), "rows": 8, "residual": 1.0,
                                                     "mu": 0.5, "L": 1.0, "seed": 4})
        rng = np.random.default_rng(3)
        self.W0 = rng.standard_normal((2, 2))
        self.W1 = self.W0 - 0.2 * self.problem.grad(self.W0)
        self.step_sq = fro_sq(self.W1 - self.W0)
        L = self.problem.component_smoothness
        # G^0 off by a fixed matrix with ||offset||^2 = 4 L^2 ||W1 - W0||^2
        direction = rng.standard_normal((2, 2))
        self.offset = direction * np.sqrt(4.0 * L ** 2 * self.step_sq / fro_sq(direction))
        self.G0 = self.problem.grad(self.W0) + self.offset

    def test_sgd_unbiased(self):
        """The mean of 10^4 sample gradients lies within 3 standard errors of the gradient"""
        draws = 10_000
        state = init_estimator("sgd", {"batch_size": 1}, self.problem, self.W1)
        rng = np.random.default_rng(21)
        total = np.zeros((2, 2))
        for _ in range(draws):
            total += advance(state, self.W1, self.W1, self.problem, rng).G
        error = np.sqrt(fro_sq(total / draws - self.problem.grad(self.W1)))
        sigma = np.sqrt(self.problem.sample_variance(self.W1))
        logger.debug(f"SGD mean error {error:.3e}, sigma {sigma:.3e}")
        self.assertGreater(sigma, 0.0)
        self.assertLessEqual(error, 3.0 * sigma / np.sqrt(draws))

    def test_page_full_gradient_fraction(self):
        """PAGE takes the full gradient on a fraction q of 10^4 updates"""
        q, steps = 0.3, 10_000
        state = init_estimator("page", {"q": q}, self.problem, self.W0)
        rng = np.random.default_rng(5)
        for _ in range(steps):
            advance(state, self.W1, self.W1, self.problem, rng)
        self.assertEqual(state.updates, steps)
        self.assertLessEqual(abs(state.full_gradient_updates / steps - q), 0.02)

    def test_mvr_gap_recursion(self):
        """The averaged MVR gap stays below (1-b)^2 G + 2(1-b)^2 L^2 ||dW||^2 + 2 b^2 sigma^2"""
        b = 0.3
        L = self.problem.component_smoothness
        gaps = []
        for seed in range(self.seeds):
            state = init_estimator("mvr", {"b": b}, self.problem, self.W0, G0=self.G0)
            advance(state, self.W1, self.W0, self.problem, np.random.default_rng(seed))
            gaps.append(estimator_gap(state, self.problem, self.W1))
        initial = fro_sq(self.offset)
        bound = ((1 - b) ** 2 * initial + 2 * (1 - b) ** 2 * L ** 2 * self.step_sq
                 + 2 * b ** 2 * self.problem.sample_variance(self.W1))
        logger.debug(f"MVR mean gap {np.mean(gaps):.4e}, bound {bound:.4e}")
        self.assertLessEqual(np.mean(gaps), 1.2 * bound)

    def test_page_gap_recursion(self):
        """The averaged PAGE gap stays below (1-q) (G + L^2 ||dW||^2)"""
        q = 0.5
        L = self.problem.component_smoothness
        state = init_estimator("page", {"q": q}, self.problem, self.W0, G0=self.G0)
        advance(state, self.W1, self.W0, self.problem, np.random.default_rng(0), force_coin=True)
        self.assertEqual(estimator_gap(state, self.problem, self.W1), 0.0)
        # a full gradient leaves no gap, so only the difference branch is averaged
        reused = []
        for seed in range(self.seeds):
            state = init_estimator("page", {"q": q}, self.problem, self.W0, G0=self.G0)
            advance(state, self.W1, self.W0, self.problem, np.random.default_rng(seed), force_coin=False)
            reused.append(estimator_gap(state, self.problem, self.W1))
        expected = (1 - q) * np.mean(reused)
        bound = (1 - q) * (fro_sq(self.offset) + L ** 2 * self.step_sq)
        logger.debug(f"PAGE expected gap {expected:.4e}, bound {bound:.4e}")
        self.assertLessEqual(expected, 1.2 * bound)


if __name__ == "__main__":
    unittest.main()
