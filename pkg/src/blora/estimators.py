#!/usr/bin/env python3
"""Single-node base gradient estimators: GD, SGD, MVR and PAGE."""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from .common import ConfigurationError, check_matrix, fro_sq
from .logs import setup_logging
from .problems import Problem

logger = setup_logging()

ESTIMATOR_KINDS = ("gd", "sgd", "mvr", "page")


@dataclass
class EstimatorState:
    """Current estimator G^t together with what the next update needs"""
    kind: str
    G: np.ndarray
    batch_size: int = 1
    b: Optional[float] = None
    q: Optional[float] = None
    W_prev: Optional[np.ndarray] = None
    initial_gap: float = 0.0
    updates: int = 0
    full_gradient_updates: int = 0
    last_indices: Optional[np.ndarray] = field(default=None, repr=False)
    last_coin: Optional[bool] = None
    comm: float = 0.0

    @property
    def sgd_equivalent(self) -> bool:
        """MVR with b = 1 is plain SGD"""
        return self.kind == "mvr" and self.b == 1.0


def _probability(value, name: str) -> float:
    if value is None:
        raise ConfigurationError("is required", name)
    value = float(value)
    if not 0.0 < value <= 1.0:
        raise ConfigurationError(f"must lie in (0, 1], got {value}", name)
    return value


def init_estimator(kind: str, params: Optional[Dict[str, Any]], problem: Problem, W0: np.ndarray,
                   rng: Optional[np.random.Generator] = None, G0: Optional[np.ndarray] = None) -> EstimatorState:
    """Create the estimator state at the starting point

    Args:
        kind: gd, sgd, mvr or page
        params: ``batch_size``, ``b`` (mvr) and ``q`` (page)
        problem: Smooth problem providing the oracles
        W0: Starting point
        rng: Unused, the initial estimator is deterministic
        G0: Initial estimator; the full gradient at W0 when omitted

    Returns:
        EstimatorState with the initial gap ||G0 - grad f(W0)||^2 recorded
    """
    if kind not in ESTIMATOR_KINDS:
        raise ConfigurationError(f"unknown estimator '{kind}', expected one of {ESTIMATOR_KINDS}", "method.estimator")
    params = dict(params or {})
    W0 = problem.check(W0)
    batch_size = int(params.get("batch_size", 1))
    if batch_size < 1 or batch_size > problem.sample_count:
        raise ConfigurationError(f"must lie in [1, {problem.sample_count}], got {batch_size}", "method.batch_size")
    b = _probability(params.get("b"), "method.b") if kind == "mvr" else None
    q = _probability(params.get("q"), "method.q") if kind == "page" else None
    grad0 = problem.grad(W0)
    G = grad0 if G0 is None else check_matrix(G0, problem.shape, "G0").copy()
    state = EstimatorState(kind, G, batch_size=batch_size, b=b, q=q,
                           W_prev=W0.copy() if kind in ("mvr", "page") else None,
                           initial_gap=fro_sq(G - grad0))
    if state.sgd_equivalent:
        logger.debug("MVR with b=1 runs as plain SGD")
    return state


def advance(state: EstimatorState, W_new: np.ndarray, W_old: np.ndarray, problem: Problem,
            rng: np.random.Generator, force_coin: Optional[bool] = None) -> EstimatorState:
    """Move the estimator from G^t at W_old to G^{t+1} at W_new

    MVR and PAGE evaluate both points on the same mini-batch. The PAGE coin is
    drawn from ``rng`` before the mini-batch; ``force_coin`` overrides it.
    """
    W_new = problem.check(W_new)
    kind = state.kind
    state.last_indices = None
    state.last_coin = None
    if kind == "gd":
        state.G = problem.grad(W_new)
    elif kind == "sgd" or state.sgd_equivalent:
        state.last_indices = problem.draw_indices(state.batch_size, rng)
        state.G = problem.batch_grad(W_new, state.last_indices)
    elif kind == "mvr":
        W_old = problem.check(W_old)
        idx = problem.draw_indices(state.batch_size, rng)
        state.last_indices = idx
        state.G = problem.batch_grad(W_new, idx) + (1.0 - state.b) * (state.G - problem.batch_grad(W_old, idx))
    else:
        W_old = problem.check(W_old)
        coin = bool(rng.random() < state.q) if force_coin is None else bool(force_coin)
        state.last_coin = coin
        if coin:
            state.G = problem.grad(W_new)
            state.full_gradient_updates += 1
        else:
            idx = problem.draw_indices(state.batch_size, rng)
            state.last_indices = idx
            state.G = state.G + problem.batch_grad(W_new, idx) - problem.batch_grad(W_old, idx)
    if state.W_prev is not None:
        state.W_prev = W_new.copy()
    state.updates += 1
    return state


def estimator_gap(state: EstimatorState, problem: Problem, W: np.ndarray) -> float:
    """||G^t - grad f(W^t)||_F^2"""
    return fro_sq(state.G - problem.grad(W))
