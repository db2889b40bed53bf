#!/usr/bin/env python3
"""Shared constants, the exception hierarchy and named random streams."""

from typing import Dict, List, Optional, Tuple

import numpy as np

CSV_HEADER = ["iter", "f", "grad_sq_norm", "estimator_gap", "lyapunov", "stepsize", "comm_scalars", "side"]
PINV_RELATIVE_TOL = 1e-12
SIDES = ("left", "right")
SIDE_CODES = {"left": "L", "right": "R"}
STREAM_NAMES = ("bernoulli", "sketch_left", "sketch_right", "data", "compressor")
OUTPUT_ROOT_ENV = "BLORA_OUTPUT_ROOT"


class BLoRAError(Exception):
    """Base class for every error raised by bLoRA"""


class ConfigurationError(BLoRAError, ValueError):
    """Invalid or inconsistent configuration value"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}" if field else message)


class ShapeError(BLoRAError, ValueError):
    """Matrix dimensions do not match what an operation expects"""


class InputError(BLoRAError, ValueError):
    """Non-finite or otherwise unusable numerical input"""


class SampleIndexError(BLoRAError, IndexError):
    """Sample index outside [0, N)"""


class UnsupportedOperationError(BLoRAError, NotImplementedError):
    """Oracle or feature not available for this kind of object"""


class InconsistencyError(BLoRAError, ArithmeticError):
    """Numerical state contradicts a mathematical precondition

    A run that hits one attaches the offending row and its partial trace.
    """
    row = None
    trace = None


class DivergenceError(BLoRAError, FloatingPointError):
    """A run produced NaN or Inf; carries the offending row and the partial trace"""

    def __init__(self, row: int, trace=None, what: str = "value"):
        self.row = row
        self.trace = trace
        super().__init__(f"non-finite {what} detected at row {row}")


class RngStreams:
    """Independent numpy generators split from one master seed

    Each concern draws from its own stream, so that changing how often one
    component samples never shifts the random numbers seen by another.
    """

    def __init__(self, seed: int):
        if int(seed) < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {seed}", "seed")
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAM_NAMES))
        self._sequences: Dict[str, np.random.SeedSequence] = dict(zip(STREAM_NAMES, children))
        self.bernoulli = np.random.default_rng(self._sequences["bernoulli"])
        self.sketch_left = np.random.default_rng(self._sequences["sketch_left"])
        self.sketch_right = np.random.default_rng(self._sequences["sketch_right"])
        self.data = np.random.default_rng(self._sequences["data"])
        self.compressor = np.random.default_rng(self._sequences["compressor"])

    def sketch(self, side: str) -> np.random.Generator:
        return self.sketch_left if side == "left" else self.sketch_right

    def client_streams(self, count: int) -> List[np.random.Generator]:
        """Per-client compressor generators, spawned in client order"""
        return [np.random.default_rng(s) for s in self._sequences["compressor"].spawn(count)]

    def position(self, name: str) -> dict:
        """Bit-generator state of a named stream, used to check a stream was left untouched"""
        return getattr(self, name).bit_generator.state


def check_matrix(W: np.ndarray, shape: Tuple[int, int], what: str = "W") -> np.ndarray:
    """Validate a parameter matrix against the expected shape and finiteness

    Returns:
        The input as a float64 array
    """
    W = np.asarray(W, dtype=np.float64)
    if W.shape != tuple(shape):
        raise ShapeError(f"{what} has shape {W.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(W)):
        raise InputError(f"{what} contains NaN or Inf")
    return W


def fro_sq(X: np.ndarray) -> float:
    """Squared Frobenius norm"""
    return float(np.vdot(X, X))


def server_average(matrices: List[np.ndarray]) -> np.ndarray:
    """Average client matrices, summed in client order"""
    total = matrices[0].copy()
    for X in matrices[1:]:
        total += X
    return total / len(matrices)
