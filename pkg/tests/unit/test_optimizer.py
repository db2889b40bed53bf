#!/usr/bin/env python3

import unittest
import math
import sys
from pathlib import Path

import numpy as np

# Add project root to Python path
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from blora.common import ConfigurationError, DivergenceError, InconsistencyError, RngStreams, ShapeError
from blora.compression import RandK
from blora.logs import setup_logging
from blora.optimizer import (
    DriverConfig, FederatedSetup, StepsizePolicy, bernoulli_step, lyapunov, lyapunov_coefficient,
    polyak_stepsize, run_chain,
)
from blora.problems import L1Config, QuadraticConfig, make_problem
from blora.sketch import SketchSpec

logger = setup_logging(verbose=True).getChild('test.optimizer')


def full_left(shape):
    return SketchSpec("left", "coordinate-subset", shape[0], shape)


class TestBernoulliStep(unittest.TestCase):
    """A single randomized low-rank step"""

    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.W = self.rng.standard_normal((3, 4))
        self.G = self.rng.standard_normal((3, 4))

    def test_full_rank_left_step_is_gradient_step(self):
        """A full-rank left sketch with p=1 gives W - gamma G"""
        W_new, side, H = bernoulli_step(self.W, self.G, 1.0, full_left((3, 4)), None, 0.1, RngStreams(0))
        self.assertEqual(side, "left")
        np.testing.assert_allclose(H, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(W_new, self.W - 0.1 * self.G, atol=1e-12)

    def test_left_fraction(self):
        """The share of left steps matches p"""
        left = SketchSpec("left", "gaussian", 1, (2, 2))
        right = SketchSpec("right", "gaussian", 1, (2, 2))
        streams = RngStreams(3)
        W, G = np.zeros((2, 2)), np.ones((2, 2))
        sides = [bernoulli_step(W, G, 0.3, left, right, 0.01, streams)[1] for _ in range(10000)]
        fraction = sides.count("left") / len(sides)
        self.assertLess(abs(fraction - 0.3), 0.015)

    def test_unused_side_stream_untouched(self):
        """With p=1 the right sketch stream is never drawn from"""
        left = SketchSpec("left", "gaussian", 2, (3, 4))
        right = SketchSpec("right", "gaussian", 2, (3, 4))
        streams = RngStreams(5)
        right_before = streams.position("sketch_right")
        left_before = streams.position("sketch_left")
        for _ in range(20):
            bernoulli_step(self.W, self.G, 1.0, left, right, 0.1, streams)
        self.assertEqual(streams.position("sketch_right"), right_before)
        self.assertNotEqual(streams.position("sketch_left"), left_before)

    def test_invalid_inputs(self):
        """Mismatched shapes and non-positive stepsizes are rejected"""
        spec = full_left((3, 4))
        with self.assertRaises(ShapeError):
            bernoulli_step(self.W, np.ones((3, 3)), 1.0, spec, None, 0.1, RngStreams(0))
        with self.assertRaises(ConfigurationError):
            bernoulli_step(self.W, self.G, 1.0, spec, None, 0.0, RngStreams(0))
        with self.assertRaises(ConfigurationError):
            bernoulli_step(self.W, self.G, 1.0, spec, None, math.nan, RngStreams(0))
        with self.assertRaises(ShapeError):
            bernoulli_step(self.W, self.G, 1.0, full_left((4, 3)), None, 0.1, RngStreams(0))


class TestStepsizeHelpers(unittest.TestCase):
    """Polyak stepsizes and Lyapunov weights"""

    def test_polyak(self):
        """gamma = (f - f*) / ||g||^2 and zero at the optimum"""
        self.assertEqual(polyak_stepsize(5.0, 1.0, 2.0), 2.0)
        self.assertEqual(polyak_stepsize(1.0, 1.0, 0.0), 0.0)
        with self.assertRaises(InconsistencyError):
            polyak_stepsize(2.0, 1.0, 0.0)
        with self.assertRaises(InconsistencyError):
            polyak_stepsize(0.0, 1.0, 1.0)

    def test_lyapunov_coefficients(self):
        """Estimator gaps are weighted by gamma lambda_max over the estimator's rate"""
        self.assertEqual(lyapunov_coefficient("gd", 0.5, 0.25), 0.0)
        self.assertAlmostEqual(lyapunov_coefficient("page", 0.5, 0.25, q=0.5), 0.125)
        self.assertAlmostEqual(lyapunov_coefficient("page", 0.5, 0.25, pl=True, q=0.5), 0.25)
        self.assertAlmostEqual(lyapunov_coefficient("mvr", 0.5, 0.25, b=1.0), 0.0625)
        self.assertAlmostEqual(lyapunov_coefficient("ef21", 0.5, 0.25, beta=1.0), 0.0625)
        self.assertTrue(math.isnan(lyapunov(1.0, None, 0.0, 0.0)))
        self.assertEqual(lyapunov(3.0, 1.0, 2.0, 0.5), 3.0)


class TestRunChain(unittest.TestCase):
    """Full Bernoulli-LoRA chains"""

    def setUp(self):
        self.identity = make_problem("quadratic-pl", QuadraticConfig(shape=(2, 2), C=np.eye(4)))
        self.problem = make_problem("quadratic-pl", {"shape": (2, 3), "mu": 0.5, "L": 1.0, "seed": 2})
        self.W0 = np.random.default_rng(4).standard_normal((2, 3))
        self.left = SketchSpec("left", "gaussian", 1, (2, 3))
        self.right = SketchSpec("right", "gaussian", 1, (2, 3))

    def config(self, **overrides):
        values = dict(p=0.5, T=30, stepsize=StepsizePolicy("theorem"), left=self.left, right=self.right, seed=7)
        values.update(overrides)
        return DriverConfig(**values)

    def test_exact_step_on_identity(self):
        """gamma=1 with a full-rank sketch solves f = ||x||^2/2 in one step"""
        W0 = np.array([[1.0, -2.0], [0.5, 3.0]])
        config = DriverConfig(p=1.0, T=2, stepsize=StepsizePolicy("constant", 1.0), left=full_left((2, 2)))
        trace = run_chain(config, self.identity, W0)
        self.assertEqual(len(trace), 2)
        np.testing.assert_allclose(trace.W_final, np.zeros((2, 2)), atol=1e-12)
        self.assertLess(trace.rows[1].f, 1e-20)
        self.assertEqual(trace.rows[0].side, "L")

    def test_trace_columns(self):
        """Every row carries the CSV columns and communication stays zero without clients"""
        trace = run_chain(self.config(), self.problem, self.W0)
        self.assertEqual(len(trace), 30)
        np.testing.assert_array_equal(trace.column("iter"), np.arange(30))
        self.assertTrue(set(trace.column("side")) <= {"L", "R"})
        np.testing.assert_array_equal(trace.column("comm_scalars"), np.zeros(30))
        self.assertEqual(trace.summary["left_steps"], trace.column("side").count("L"))
        self.assertAlmostEqual(trace.rows[0].f, self.problem.eval(self.W0), places=12)
        with self.assertRaises(KeyError):
            trace.column("loss")

    def test_deterministic(self):
        """The same seed reproduces the trace exactly"""
        first = run_chain(self.config(), self.problem, self.W0)
        second = run_chain(self.config(), self.problem, self.W0)
        self.assertEqual(first.rows, second.rows)
        other = run_chain(self.config(seed=8), self.problem, self.W0)
        self.assertNotEqual(first.rows, other.rows)

    def test_stepsize_policies(self):
        """Theorem, multiplier and constant policies give the expected gamma"""
        trace = run_chain(self.config(T=2), self.problem, self.W0)
        self.assertEqual(trace.theorem, "gd")
        self.assertEqual(trace.gamma, 1.0)
        self.assertEqual(trace.provenance, "analytic")
        trace = run_chain(self.config(T=2, pl=True), self.problem, self.W0)
        self.assertEqual(trace.theorem, "gd-pl")
        trace = run_chain(self.config(T=2, stepsize=StepsizePolicy("multiplier", 0.5)), self.problem, self.W0)
        self.assertEqual(trace.gamma, 0.5)
        trace = run_chain(self.config(T=2, stepsize=StepsizePolicy("constant", 0.3)), self.problem, self.W0)
        self.assertEqual(trace.gamma, 0.3)
        trace = run_chain(self.config(T=2, stepsize=StepsizePolicy("theorem", params={"L": 4.0})),
                          self.problem, self.W0)
        self.assertEqual(trace.gamma, 0.25)

    def test_gradient_norm_decreases(self):
        """The theorem stepsize reduces the gradient norm on a PL quadratic"""
        trace = run_chain(self.config(T=200), self.problem, self.W0)
        gsq = trace.column("grad_sq_norm")
        self.assertLess(gsq[-1], 0.1 * gsq[0])
        self.assertTrue(math.isfinite(trace.summary["bound"]))

    def test_stop_threshold(self):
        """Reaching stop_grad_sq records the row without taking a step"""
        W0 = np.array([[1.0, -2.0], [0.5, 3.0]])
        config = DriverConfig(p=1.0, T=10, stepsize=StepsizePolicy("constant", 1.0), left=full_left((2, 2)),
                              stop_grad_sq=1e-20)
        trace = run_chain(config, self.identity, W0)
        self.assertEqual(len(trace), 2)
        self.assertEqual(trace.summary["stopped_at"], 1)
        self.assertFalse(trace.summary["halted"])
        self.assertEqual(trace.rows[1].side, "")

    def test_divergence(self):
        """A far too large stepsize raises with the partial trace attached"""
        config = DriverConfig(p=1.0, T=500, stepsize=StepsizePolicy("constant", 1e3), left=full_left((2, 2)))
        with np.errstate(over="ignore", invalid="ignore"):
            with self.assertRaises(DivergenceError) as ctx:
                run_chain(config, self.identity, np.ones((2, 2)))
        self.assertGreater(ctx.exception.row, 0)
        self.assertEqual(len(ctx.exception.trace), ctx.exception.row)

    def test_factored_matches_projected(self):
        """Training the factor with gamma = alpha eta / r follows the projected chain"""
        projected = run_chain(self.config(T=20, stepsize=StepsizePolicy("constant", 0.1)), self.problem, self.W0)
        factored = run_chain(self.config(T=20, stepsize=StepsizePolicy("constant", 0.1), update="factored",
                                         alpha=2.0, rank=1, eta=0.05), self.problem, self.W0)
        np.testing.assert_allclose(factored.column("f"), projected.column("f"), rtol=1e-9, atol=1e-14)
        self.assertEqual(factored.column("side"), projected.column("side"))

    def test_variance_reduced_run(self):
        """PAGE on a finite sum tracks a Lyapunov value for every row"""
        problem = make_problem("quadratic-pl", {"shape": (2, 3), "rows": 12, "residual": 0.5, "mu": 0.5,
                                                "seed": 2})
        trace = run_chain(self.config(T=40, estimator="page", estimator_params={"q": 0.5}), problem, self.W0)
        lyap = trace.column("lyapunov")
        self.assertTrue(np.all(np.isfinite(lyap)))
        self.assertEqual(trace.theorem, "page")
        self.assertEqual(trace.params.L, max(problem.smoothness, problem.component_smoothness))

    def test_federated_run(self):
        """MARINA counts the scalars sent by the clients"""
        problem = make_problem("quadratic-pl", {"shape": (2, 3), "rows": 12, "residual": 0.5, "mu": 0.5,
                                                "seed": 2})
        setup = FederatedSetup(problem.partition(3, 0), [RandK(6, 2) for _ in range(3)], q=0.5)
        trace = run_chain(self.config(T=15, estimator="marina"), problem, self.W0, federated=setup)
        comm = trace.column("comm_scalars")
        self.assertEqual(comm[0], 18.0)
        self.assertTrue(np.all(np.diff(comm) > 0))
        self.assertEqual(trace.theorem, "marina")

    def test_invalid_configs(self):
        """Out-of-range driver settings are rejected up front"""
        with self.assertRaises(ConfigurationError):
            self.config(p=1.5)
        with self.assertRaises(ConfigurationError):
            self.config(T=0)
        with self.assertRaises(ConfigurationError):
            self.config(right=None)
        with self.assertRaises(ConfigurationError):
            self.config(selection="best")
        with self.assertRaises(ConfigurationError):
            self.config(update="adapter")
        with self.assertRaises(ConfigurationError):
            StepsizePolicy("constant")
        with self.assertRaises(ConfigurationError):
            StepsizePolicy("armijo", 0.1)
        with self.assertRaises(ConfigurationError):
            self.config(stepsize=StepsizePolicy("constant", 0.1), alpha=2.0, rank=1, eta=0.1)
        with self.assertRaises(ConfigurationError):
            run_chain(self.config(stepsize=StepsizePolicy("polyak")), self.problem, self.W0)


class TestNonsmoothChain(unittest.TestCase):
    """Subgradient chains on convex non-smooth problems"""

    def test_polyak_on_absolute_value(self):
        """|x| from x=3 with the Polyak stepsize reaches 0 in one step and halts"""
        problem = make_problem("nonsmooth-l1", L1Config(shape=(1, 1), D=np.array([[1.0]]), W_star=np.zeros((1, 1))))
        config = DriverConfig(p=1.0, T=5, stepsize=StepsizePolicy("polyak"), left=full_left((1, 1)),
                              estimator="subgradient")
        trace = run_chain(config, problem, np.array([[3.0]]))
        self.assertEqual(trace.rows[0].stepsize, 3.0)
        self.assertEqual(trace.W_final[0, 0], 0.0)
        self.assertEqual(len(trace), 2)
        self.assertTrue(trace.summary["halted"])
        self.assertAlmostEqual(trace.W_average[0, 0], 0.6)
        self.assertEqual(trace.theorem, "nonsmooth-polyak")

    def test_polyak_below_optimum(self):
        """A value below f* stops the chain with the row and the trace attached"""
        problem = make_problem("nonsmooth-l1", L1Config(shape=(1, 1), D=np.array([[1.0]]), W_star=np.zeros((1, 1))))
        problem.opt_value = 5.0
        config = DriverConfig(p=1.0, T=5, stepsize=StepsizePolicy("polyak"), left=full_left((1, 1)),
                              estimator="subgradient")
        with self.assertRaises(InconsistencyError) as ctx:
            run_chain(config, problem, np.array([[3.0]]))
        self.assertEqual(ctx.exception.row, 0)
        self.assertEqual(len(ctx.exception.trace), 0)

    def test_constant_stepsize(self):
        """The constant rule uses R0 / (L0 sqrt(alpha T)) and reports the averaged iterate"""
        problem = make_problem("nonsmooth-l1", {"shape": (2, 4), "rows": 20, "seed": 2})
        right = SketchSpec("right", "gaussian", 1, (2, 4))
        config = DriverConfig(p=0.0, T=50, stepsize=StepsizePolicy("theorem"), right=right,
                              estimator="subgradient")
        trace = run_chain(config, problem, np.zeros((2, 4)))
        params = trace.params
        self.assertEqual(trace.theorem, "nonsmooth-constant")
        self.assertAlmostEqual(trace.gamma, params.R0 / (params.L0 * math.sqrt(0.25 * 50)), places=12)
        self.assertEqual(trace.W_average.shape, (2, 4))
        self.assertTrue(math.isfinite(trace.summary["average_f"]))

    def test_smooth_estimators_rejected(self):
        """Non-smooth problems only accept the subgradient method"""
        problem = make_problem("nonsmooth-l1", {"shape": (2, 4), "rows": 20, "seed": 2})
        right = SketchSpec("right", "gaussian", 1, (2, 4))
        config = DriverConfig(p=0.0, T=5, stepsize=StepsizePolicy("theorem"), right=right, estimator="page")
        with self.assertRaises(ConfigurationError):
            run_chain(config, problem)


if __name__ == "__main__":
    unittest.main()
