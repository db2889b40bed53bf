#!/usr/bin/env python3

import unittest
import sys
from pathlib import Path

import numpy as np

# Add project root to Python path
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from blora.common import ConfigurationError, RngStreams, fro_sq
from blora.compression import IdentityCompressor, RandK, TopK, make_compressor
from blora.federated import (
    advance_federated, client_gap, ef21_round, federated_gap, init_federated, marina_round, qgd_round,
)
from blora.logs import setup_logging
from blora.problems import make_problem

logger = setup_logging(verbose=True).getChild('test.federated')


class TestFederatedEstimators(unittest.TestCase):
    """Simulated multi-client estimators"""

    def setUp(self):
        self.problem = make_problem("quadratic-pl", {"shape": (2, 2), "rows": 12, "residual": 1.0,
                                                     "mu": 0.5, "L": 1.0, "seed": 9})
        self.clients = self.problem.partition(3, 0)
        self.W0 = np.random.default_rng(1).standard_normal((2, 2))
        self.W1 = self.W0 - 0.1 * self.problem.grad(self.W0)
        self.streams = RngStreams(0)

    def start(self, kind, compressors, q=None):
        return init_federated(kind, self.clients, self.W0, compressors,
                              self.streams.client_streams(len(self.clients)), q=q)

    def test_distributed_gd(self):
        """Distributed GD averages exact client gradients and sends d scalars per client"""
        state = self.start("gd", [IdentityCompressor(4)] * 3)
        np.testing.assert_allclose(state.G, self.problem.grad(self.W0), rtol=1e-10, atol=1e-12)
        self.assertEqual(state.comm, 12)
        advance_federated(state, self.W1, self.W0, self.streams.data)
        self.assertEqual(state.comm, 24)
        self.assertLess(federated_gap(state, self.problem, self.W1), 1e-20)

    def test_qgd_communication(self):
        """QGD with rand-k sends 2k scalars per client per round"""
        state = self.start("qgd", [RandK(4, 2) for _ in range(3)])
        self.assertEqual(state.comm, 12)
        advance_federated(state, self.W1, self.W0, self.streams.data)
        self.assertEqual(state.comm, 24)
        self.assertEqual(state.omega, 1.0)

    def test_marina_starts_synchronized(self):
        """MARINA starts from the exact client gradients and counts a full synchronization"""
        state = self.start("marina", [RandK(4, 2) for _ in range(3)], q=0.2)
        self.assertEqual(state.comm, 12)
        self.assertEqual(client_gap(state, self.W0), 0.0)
        marina_round(state, self.W1, self.W0, self.streams.data, force_coin=True)
        for G, client in zip(state.G_local, self.clients):
            np.testing.assert_array_equal(G, client.grad(self.W1))
        self.assertEqual(state.full_rounds, 1)

    def test_marina_compressed_differences(self):
        """Without synchronization clients add compressed gradient differences"""
        state = self.start("marina", [RandK(4, 2) for _ in range(3)], q=0.2)
        before = [G.copy() for G in state.G_local]
        marina_round(state, self.W1, self.W0, self.streams.data, force_coin=False)
        for G_new, G_old, client in zip(state.G_local, before, self.clients):
            diff = G_new - G_old
            self.assertEqual(np.count_nonzero(diff), 2)
        self.assertEqual(state.comm, 12 + 3 * 4)

    def test_ef21_identity(self):
        """EF21 with the identity tracks client gradients exactly"""
        state = self.start("ef21", [IdentityCompressor(4) for _ in range(3)])
        advance_federated(state, self.W1, self.W0, self.streams.data)
        self.assertEqual(client_gap(state, self.W1), 0.0)

    def test_ef21_top_k_error_feedback(self):
        """EF21 moves each client state by the compressed residual"""
        state = self.start("ef21", [TopK(4, 1) for _ in range(3)])
        before = [G.copy() for G in state.G_local]
        advance_federated(state, self.W1, self.W0, self.streams.data)
        for G_new, G_old, client in zip(state.G_local, before, self.clients):
            expected = G_old + TopK(4, 1).compress(client.grad(self.W1) - G_old)
            np.testing.assert_array_equal(G_new, expected)
        self.assertEqual(state.beta, 0.25)

    def test_compressor_families(self):
        """MARINA and QGD need unbiased operators, EF21 contractive ones"""
        with self.assertRaises(ConfigurationError):
            self.start("marina", [TopK(4, 2) for _ in range(3)], q=0.5)
        with self.assertRaises(ConfigurationError):
            self.start("ef21", [RandK(4, 2) for _ in range(3)])
        self.start("ef21", [make_compressor("rand-k", 4, k=2, scaled=True) for _ in range(3)])

    def test_invalid_setups(self):
        """Mismatched compressors, missing q and unknown kinds are rejected"""
        with self.assertRaises(ConfigurationError):
            self.start("gd", [IdentityCompressor(4)])
        with self.assertRaises(ConfigurationError):
            self.start("marina", [RandK(4, 2) for _ in range(3)])
        with self.assertRaises(ConfigurationError):
            self.start("diana", [IdentityCompressor(4)] * 3)


class TestFederatedStatistics(unittest.TestCase):
    """Recursions and averages the federated estimators satisfy round by round"""

    def test_qgd_unbiased(self):
        """The QGD server mean over 10^4 rounds lies within 3 standard errors of the gradient"""
        problem = make_problem("quadratic-pl", {"shape": (1, 2), "rows": 6, "residual": 0.5,
                                                "mu": 0.5, "L": 1.0, "seed": 2})
        clients = problem.partition(2, 0)
        W = np.array([[1.0, -2.0]])
        state = init_federated("qgd", clients, W, [RandK(2, 1), RandK(2, 1)], RngStreams(3).client_streams(2))
        rounds = 10_000
        total = np.zeros((1, 2))
        for _ in range(rounds):
            total += qgd_round(state, W)
        grad = problem.grad(W)
        # rand-k errors are independent across clients with E||Q(x) - x||^2 = omega ||x||^2
        variance = sum(c.omega * fro_sq(client.grad(W))
                       for c, client in zip(state.compressors, clients)) / len(clients) ** 2
        error = np.sqrt(fro_sq(total / rounds - grad))
        logger.debug(f"QGD mean error {error:.3e}, sigma {np.sqrt(variance):.3e}")
        self.assertGreater(variance, 0.0)
        self.assertLessEqual(error, 3.0 * np.sqrt(variance / rounds))

    def test_marina_gap_recursion(self):
        """The averaged MARINA gap stays below (1-q) (G + omega L^2 ||dW||^2 / M)"""
        problem = make_problem("quadratic-pl", {"shape": (2, 2), "rows": 16, "residual": 1.0,
                                                "mu": 0.5, "L": 1.0, "seed": 7})
        clients = problem.partition(4, 1)
        rng = np.random.default_rng(8)
        W0 = rng.standard_normal((2, 2))
        W1 = W0 - 0.2 * problem.grad(W0)
        q, M, omega = 0.5, len(clients), RandK(4, 2).omega
        L = max(client.smoothness for client in clients)
        compression_term = omega * L ** 2 * fro_sq(W1 - W0) / M
        direction = rng.standard_normal((2, 2))
        offset = direction * np.sqrt(4.0 * compression_term / fro_sq(direction))
        G0_local = [client.grad(W0) + offset for client in clients]

        def start(seed):
            return init_federated("marina", clients, W0, [RandK(4, 2) for _ in range(M)],
                                  RngStreams(seed).client_streams(M), q=q, G0_local=G0_local)

        state = start(0)
        self.assertAlmostEqual(federated_gap(state, problem, W0), fro_sq(offset), places=12)
        marina_round(state, W1, W0, np.random.default_rng(0), force_coin=True)
        self.assertLess(federated_gap(state, problem, W1), 1e-20)
        # synchronization leaves no gap, so only the compressed branch is averaged
        compressed = []
        for seed in range(200):
            state = start(seed)
            marina_round(state, W1, W0, np.random.default_rng(seed), force_coin=False)
            compressed.append(federated_gap(state, problem, W1))
        expected = (1 - q) * np.mean(compressed)
        bound = (1 - q) * (fro_sq(offset) + compression_term)
        logger.debug(f"MARINA expected gap {expected:.4e}, bound {bound:.4e}")
        self.assertLessEqual(expected, 1.2 * bound)

    def test_ef21_contraction_per_round(self):
        """Each EF21 client gap obeys the sqrt(1-beta) recursion in every round"""
        problem = make_problem("quadratic-pl", {"shape": (1, 2), "rows": 6, "residual": 0.5,
                                                "mu": 0.5, "L": 1.0, "seed": 2})
        clients = problem.partition(2, 0)
        W = np.array([[1.5, -0.5]])
        G0_local = [client.grad(W) + np.array([[0.3, -0.4]]) for client in clients]
        state = init_federated("ef21", clients, W, [TopK(2, 1), TopK(2, 1)],
                               RngStreams(0).client_streams(2), G0_local=G0_local)
        beta = state.beta
        self.assertEqual(beta, 0.5)
        shrink = np.sqrt(1 - beta)
        self.assertAlmostEqual(shrink, 0.7071, places=4)
        for _ in range(30):
            gaps = [fro_sq(G - client.grad(W)) for G, client in zip(state.G_local, clients)]
            W_new = W - 0.1 * state.G
            ef21_round(state, W_new)
            for G, client, gap in zip(state.G_local, clients, gaps):
                new_gap = fro_sq(G - client.grad(W_new))
                bound = (shrink * gap
                         + (1 - beta) * client.smoothness ** 2 * fro_sq(W_new - W) / (1 - shrink))
                self.assertLessEqual(new_gap, bound * (1 + 1e-9) + 1e-15)
            W = W_new

    def test_server_average_identity(self):
        """After every MARINA and EF21 round the server holds the mean of the client states"""
        problem = make_problem("quadratic-pl", {"shape": (2, 2), "rows": 12, "residual": 1.0,
                                                "mu": 0.5, "L": 1.0, "seed": 9})
        clients = problem.partition(3, 0)
        for kind, compressors in (("marina", [RandK(4, 1) for _ in range(3)]),
                                  ("ef21", [TopK(4, 2) for _ in range(3)])):
            streams = RngStreams(4)
            W = np.random.default_rng(1).standard_normal((2, 2))
            state = init_federated(kind, clients, W, compressors, streams.client_streams(3), q=0.3)
            for _ in range(25):
                W_new = W - 0.1 * state.G
                advance_federated(state, W_new, W, streams.data)
                np.testing.assert_allclose(state.G, np.mean(state.G_local, axis=0), rtol=1e-12, atol=1e-15)
                W = W_new


if __name__ == "__main__":
    unittest.main()
