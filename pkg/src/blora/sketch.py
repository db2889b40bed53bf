#!/usr/bin/env python3
"""Left/right sketches, the projections they induce and their expected spectra."""

import itertools
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .common import PINV_RELATIVE_TOL, SIDES, ConfigurationError, InputError, ShapeError
from .logs import setup_logging

logger = setup_logging()

SKETCH_DISTRIBUTIONS = ("gaussian", "coordinate-subset")


@dataclass(frozen=True)
class SketchSpec:
    """Distribution of the frozen random factor

    A left sketch is an ``m x r`` matrix B (the update lives in its column
    space), a right sketch an ``r x n`` matrix A (the update lives in its row
    space).
    """
    side: str
    distribution: str
    rank: int
    dims: Tuple[int, int]

    def __post_init__(self):
        if self.side not in SIDES:
            raise ConfigurationError(f"unknown side '{self.side}', expected one of {SIDES}", "sketch.side")
        if self.distribution not in SKETCH_DISTRIBUTIONS:
            raise ConfigurationError(f"unknown distribution '{self.distribution}', "
                                     f"expected one of {SKETCH_DISTRIBUTIONS}", "sketch.distribution")
        object.__setattr__(self, "dims", (int(self.dims[0]), int(self.dims[1])))
        if int(self.rank) != self.rank or self.rank < 1:
            raise ConfigurationError(f"rank must be a positive integer, got {self.rank}", "sketch.rank")
        if self.rank > self.ambient:
            raise ConfigurationError(f"rank {self.rank} exceeds the {self.side} dimension {self.ambient}", "sketch.rank")

    @property
    def ambient(self) -> int:
        """Dimension the projection acts on: m for left sketches, n for right ones"""
        return self.dims[0] if self.side == "left" else self.dims[1]

    @property
    def expected_eigenvalue(self) -> float:
        """r/d, the common eigenvalue of E[H] for both shipped distributions"""
        return self.rank / self.ambient


@dataclass(frozen=True)
class SpectralWeights:
    lmin_left: float
    lmax_left: float
    lmin_right: float
    lmax_right: float
    p: float

    @property
    def lmin(self) -> float:
        return self.p * self.lmin_left + (1.0 - self.p) * self.lmin_right

    @property
    def lmax(self) -> float:
        return self.p * self.lmax_left + (1.0 - self.p) * self.lmax_right


def sample_sketch(spec: SketchSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one sketch matrix (m x r on the left, r x n on the right)"""
    d, r = spec.ambient, spec.rank
    if spec.distribution == "gaussian":
        shape = (d, r) if spec.side == "left" else (r, d)
        return rng.standard_normal(shape)
    idx = rng.choice(d, size=r, replace=False)
    return coordinate_sketch(spec, idx)


def coordinate_sketch(spec: SketchSpec, indices) -> np.ndarray:
    """Sketch made of the standard basis vectors with the given indices"""
    d, r = spec.ambient, spec.rank
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (r,) or len(set(indices.tolist())) != r:
        raise ConfigurationError(f"need {r} distinct indices, got {indices.tolist()}", "sketch.indices")
    if spec.side == "left":
        S = np.zeros((d, r))
        S[indices, np.arange(r)] = 1.0
    else:
        S = np.zeros((r, d))
        S[np.arange(r), indices] = 1.0
    return S


def gram_pinv(gram: np.ndarray, tol: float = PINV_RELATIVE_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric PSD Gram matrix

    Eigenvalues at or below ``tol`` times the largest one are treated as zero.
    """
    w, V = np.linalg.eigh(gram)
    top = w[-1] if w.size else 0.0
    if top <= 0.0:
        return np.zeros_like(gram)
    keep = w > tol * top
    Vk = V[:, keep]
    return (Vk / w[keep]) @ Vk.T


def projection_from_sketch(S: np.ndarray, side: str, tol: float = PINV_RELATIVE_TOL) -> np.ndarray:
    """Orthogonal projector onto the column space of B (left) or the row space of A (right)

    Left: H_B = B (B^T B)^+ B^T. Right: H_A = A^T (A A^T)^+ A. The result is
    symmetrized so that H equals its transpose exactly.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ShapeError(f"sketch must be a matrix, got {S.ndim} dimensions")
    if not np.all(np.isfinite(S)):
        raise InputError("sketch contains NaN or Inf")
    if side == "left":
        H = S @ gram_pinv(S.T @ S, tol) @ S.T
    elif side == "right":
        H = S.T @ gram_pinv(S @ S.T, tol) @ S
    else:
        raise ConfigurationError(f"unknown side '{side}'", "side")
    return 0.5 * (H + H.T)


def project(G: np.ndarray, H: np.ndarray, side: str) -> np.ndarray:
    """H_B G for a left projection, G H_A for a right one"""
    return H @ G if side == "left" else G @ H


def _mean_spectrum(mean: np.ndarray) -> Tuple[np.ndarray, float, float]:
    eig = np.linalg.eigvalsh(0.5 * (mean + mean.T))
    return mean, float(eig[0]), float(eig[-1])


def estimate_expected_projection(spec: SketchSpec, draws: int, rng: np.random.Generator
                                 ) -> Tuple[np.ndarray, float, float]:
    """Monte-Carlo mean of H over independent sketches

    Returns:
        Tuple of (mean matrix, smallest eigenvalue, largest eigenvalue)
    """
    if draws < 1:
        raise ConfigurationError(f"draws must be at least 1, got {draws}", "draws")
    total = np.zeros((spec.ambient, spec.ambient))
    for _ in range(draws):
        total += projection_from_sketch(sample_sketch(spec, rng), spec.side)
    return _mean_spectrum(total / draws)


def enumerate_expected_projection(spec: SketchSpec) -> Tuple[np.ndarray, float, float]:
    """Exact E[H] of a coordinate-subset sketch over all C(d, r) index sets"""
    if spec.distribution != "coordinate-subset":
        raise ConfigurationError("exact enumeration needs a coordinate-subset sketch", "sketch.distribution")
    total = np.zeros((spec.ambient, spec.ambient))
    count = 0
    for subset in itertools.combinations(range(spec.ambient), spec.rank):
        total += projection_from_sketch(coordinate_sketch(spec, subset), spec.side)
        count += 1
    return _mean_spectrum(total / count)


def spectral_weights(p: float, left_spec: Optional[SketchSpec], right_spec: Optional[SketchSpec],
                     method: str = "analytic", rng: Optional[np.random.Generator] = None,
                     draws: int = 2000) -> SpectralWeights:
    """Probability-weighted extreme eigenvalues of the expected projections

    Args:
        p: Probability of a left step
        left_spec: Left sketch, may be None when p == 0
        right_spec: Right sketch, may be None when p == 1
        method: "analytic" (r/m and r/n) or "monte-carlo"
        rng: Generator for the Monte-Carlo method
        draws: Number of Monte-Carlo sketches per side

    Returns:
        SpectralWeights with lmin/lmax properties

    Raises:
        ConfigurationError: p outside [0, 1], a needed side missing, or a
            non-positive weighted minimum eigenvalue
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"must lie in [0, 1], got {p}", "p")
    if method not in ("analytic", "monte-carlo"):
        raise ConfigurationError(f"unknown method '{method}'", "method")
    values = {}
    for side, spec, weight in (("left", left_spec, p), ("right", right_spec, 1.0 - p)):
        if spec is None:
            if weight > 0:
                raise ConfigurationError(f"p={p} needs a {side} sketch", f"sketch.{side}")
            values[side] = (0.0, 0.0)
        elif method == "analytic":
            values[side] = (spec.expected_eigenvalue, spec.expected_eigenvalue)
        else:
            _, lo, hi = estimate_expected_projection(spec, draws, rng if rng is not None else np.random.default_rng())
            values[side] = (lo, hi)
    weights = SpectralWeights(values["left"][0], values["left"][1], values["right"][0], values["right"][1], float(p))
    if weights.lmin <= 0.0:
        raise ConfigurationError(f"expected projection is not positive definite (lambda_min^p = {weights.lmin:.3g})",
                                 "sketch")
    logger.debug(f"Spectral weights p={p}: lambda_min={weights.lmin:.6g}, lambda_max={weights.lmax:.6g}")
    return weights


def factored_update(W: np.ndarray, G: np.ndarray, S: np.ndarray, side: str, gamma: Optional[float] = None,
                    alpha: Optional[float] = None, rank: Optional[int] = None,
                    eta: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """One GD step on the trainable factor of a LoRA pair with the other factor frozen

    Left: A_hat = -eta (B^T B)^+ B^T G and W' = W + (alpha/r) B A_hat.
    Right: B_hat = -eta G A^T (A A^T)^+ and W' = W + (alpha/r) B_hat A.
    With gamma = alpha * eta / r this equals the projected step W - gamma H G.

    Returns:
        Tuple of (new W, trained factor)
    """
    W = np.asarray(W, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if W.shape != G.shape:
        raise ShapeError(f"W {W.shape} and G {G.shape} differ")
    r = S.shape[1] if side == "left" else S.shape[0]
    rank = r if rank is None else rank
    if alpha is None and eta is None:
        if gamma is None:
            raise ConfigurationError("need gamma or both alpha and eta", "gamma")
        alpha, eta = float(rank), float(gamma)
    elif alpha is None or eta is None:
        raise ConfigurationError("alpha and eta must be given together", "alpha")
    if gamma is not None and abs(gamma - alpha * eta / rank) > 1e-12 * max(1.0, abs(gamma)):
        raise ConfigurationError(f"gamma={gamma} differs from alpha*eta/r={alpha * eta / rank}", "gamma")
    if side == "left":
        if S.shape[0] != W.shape[0]:
            raise ShapeError(f"left sketch {S.shape} does not match W {W.shape}")
        factor = -eta * (gram_pinv(S.T @ S) @ (S.T @ G))
        return W + (alpha / rank) * (S @ factor), factor
    if side == "right":
        if S.shape[1] != W.shape[1]:
            raise ShapeError(f"right sketch {S.shape} does not match W {W.shape}")
        factor = -eta * ((G @ S.T) @ gram_pinv(S @ S.T))
        return W + (alpha / rank) * (factor @ S), factor
    raise ConfigurationError(f"unknown side '{side}'", "side")
