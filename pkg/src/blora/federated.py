#!/usr/bin/env python3
"""Simulated multi-client estimators: distributed GD, QGD, MARINA and EF21.

Clients run sequentially inside one process. Each owns a compressor and its own
random stream; the server averages client messages in fixed client order.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .common import ConfigurationError, check_matrix, fro_sq, server_average
from .compression import Compressor, require_contractive, require_unbiased
from .logs import setup_logging
from .problems import Problem

logger = setup_logging()

FEDERATED_KINDS = ("gd", "qgd", "marina", "ef21")


@dataclass
class FederatedState:
    """Server estimator G and the per-client states behind it"""
    kind: str
    clients: List[Problem]
    compressors: List[Compressor]
    client_rngs: List[np.random.Generator] = field(repr=False)
    G: Optional[np.ndarray] = None
    G_local: Optional[List[np.ndarray]] = None
    q: Optional[float] = None
    comm: float = 0.0
    rounds: int = 0
    full_rounds: int = 0
    initial_gap: float = 0.0
    initial_client_gap: float = 0.0
    last_coin: Optional[bool] = None

    @property
    def M(self) -> int:
        return len(self.clients)

    @property
    def dim(self) -> int:
        return self.clients[0].dim

    @property
    def omega(self) -> Optional[float]:
        """Largest variance parameter over the client compressors"""
        values = [c.omega for c in self.compressors]
        return None if any(v is None for v in values) else max(values)

    @property
    def beta(self) -> Optional[float]:
        """Smallest contraction parameter over the client compressors"""
        values = [c.beta for c in self.compressors]
        return None if any(v is None for v in values) else min(values)


def _client_grads(state: FederatedState, W: np.ndarray) -> List[np.ndarray]:
    return [client.grad(W) for client in state.clients]


def init_federated(kind: str, clients: List[Problem], W0: np.ndarray, compressors: List[Compressor],
                   client_rngs: List[np.random.Generator], q: Optional[float] = None,
                   G0_local: Optional[List[np.ndarray]] = None) -> FederatedState:
    """Create the federated state and its estimator at W0

    GD and QGD compute G^0 with one regular round. MARINA and EF21 start every
    client at G_l^0 = grad f_l(W0) unless ``G0_local`` is supplied, and the
    initial full synchronization is counted as d scalars per client.
    """
    if kind not in FEDERATED_KINDS:
        raise ConfigurationError(f"unknown federated estimator '{kind}', expected one of {FEDERATED_KINDS}",
                                 "method.estimator")
    if not clients:
        raise ConfigurationError("at least one client is required", "method.clients")
    if len(compressors) != len(clients) or len(client_rngs) != len(clients):
        raise ConfigurationError(f"{len(clients)} clients need as many compressors and streams", "method.compressor")
    if kind in ("qgd", "marina"):
        for c in compressors:
            require_unbiased(c, kind)
    if kind == "ef21":
        for c in compressors:
            require_contractive(c, kind)
    if kind == "marina":
        if q is None or not 0.0 < q <= 1.0:
            raise ConfigurationError(f"must lie in (0, 1], got {q}", "method.q")
    state = FederatedState(kind, list(clients), list(compressors), list(client_rngs), q=q)
    W0 = clients[0].check(W0)
    if kind == "gd":
        gd_round(state, W0)
    elif kind == "qgd":
        qgd_round(state, W0)
    else:
        grads = _client_grads(state, W0)
        if G0_local is None:
            state.G_local = [g.copy() for g in grads]
        else:
            if len(G0_local) != state.M:
                raise ConfigurationError(f"{len(G0_local)} initial states for {state.M} clients", "G0_local")
            state.G_local = [check_matrix(G, clients[0].shape, "G0_local").copy() for G in G0_local]
        state.G = server_average(state.G_local)
        state.comm += state.M * state.dim
        state.initial_client_gap = client_gap(state, W0, grads)
        state.initial_gap = fro_sq(state.G - server_average(grads))
    logger.debug(f"Federated {kind} with {state.M} clients, compressors {state.compressors[0].describe()}")
    return state


def gd_round(state: FederatedState, W: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Distributed full gradient: every client sends its exact gradient"""
    state.G = server_average(_client_grads(state, W))
    state.comm += state.M * state.dim
    state.rounds += 1
    state.full_rounds += 1
    return state.G


def qgd_round(state: FederatedState, W: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """G = (1/M) sum_l Q_l(grad f_l(W)) with fresh compression"""
    messages = [c.compress(client.grad(W), crng)
                for client, c, crng in zip(state.clients, state.compressors, state.client_rngs)]
    state.G = server_average(messages)
    state.comm += sum(c.comm_scalars() for c in state.compressors)
    state.rounds += 1
    return state.G


def marina_round(state: FederatedState, W_new: np.ndarray, W_old: np.ndarray,
                 rng: np.random.Generator, force_coin: Optional[bool] = None) -> np.ndarray:
    """Compressed gradient differences with one shared synchronization coin

    With probability q every client sends its full gradient; otherwise client l
    sends Q_l(grad f_l(W_new) - grad f_l(W_old)). A compressor with omega = 0 is
    the identity, so the client state becomes grad f_l(W_new) directly.
    """
    coin = bool(rng.random() < state.q) if force_coin is None else bool(force_coin)
    state.last_coin = coin
    for l, (client, c, crng) in enumerate(zip(state.clients, state.compressors, state.client_rngs)):
        g_new = client.grad(W_new)
        if coin:
            state.G_local[l] = g_new
            state.comm += state.dim
        elif c.omega == 0.0:
            state.G_local[l] = g_new
            state.comm += c.comm_scalars()
        else:
            state.G_local[l] = state.G_local[l] + c.compress(g_new - client.grad(W_old), crng)
            state.comm += c.comm_scalars()
    state.G = server_average(state.G_local)
    state.rounds += 1
    state.full_rounds += int(coin)
    return state.G


def ef21_round(state: FederatedState, W_new: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Error feedback: G_l += C_l(grad f_l(W_new) - G_l)

    A compressor with beta = 1 is the identity, so G_l becomes the gradient.
    """
    for l, (client, c, crng) in enumerate(zip(state.clients, state.compressors, state.client_rngs)):
        g_new = client.grad(W_new)
        if c.beta == 1.0:
            state.G_local[l] = g_new
        else:
            state.G_local[l] = state.G_local[l] + c.compress(g_new - state.G_local[l], crng)
        state.comm += c.comm_scalars()
    state.G = server_average(state.G_local)
    state.rounds += 1
    return state.G


def advance_federated(state: FederatedState, W_new: np.ndarray, W_old: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """One round of the configured kind; ``rng`` supplies the MARINA coin"""
    if state.kind == "gd":
        return gd_round(state, W_new)
    if state.kind == "qgd":
        return qgd_round(state, W_new)
    if state.kind == "marina":
        return marina_round(state, W_new, W_old, rng)
    return ef21_round(state, W_new)


def client_gap(state: FederatedState, W: np.ndarray, grads: Optional[List[np.ndarray]] = None) -> float:
    """(1/M) sum_l ||G_l - grad f_l(W)||^2, zero for kinds without client states"""
    if state.G_local is None:
        return 0.0
    grads = _client_grads(state, W) if grads is None else grads
    return float(np.mean([fro_sq(G - g) for G, g in zip(state.G_local, grads)]))


def federated_gap(state: FederatedState, problem: Problem, W: np.ndarray) -> float:
    """||G - grad f(W)||^2 at the server"""
    return fro_sq(state.G - problem.grad(W))
