#!/usr/bin/env python3
"""Objective functions with hand-derived oracles and synthetic problem generators.

Every problem acts on a parameter matrix ``W`` of shape ``(m, n)``; data-fitting
terms see its row-major flattening ``x = vec(W)``. Finite-sum problems group the
data rows into ``N`` sample blocks and define

    f_i(x) = (N * w / 2) * ||D_{B_i} x - b_{B_i}||^2 + lam * sum_j x_j^2 / (1 + x_j^2)

so that the average of the ``f_i`` is the full objective (``w`` is the data
weight, ``1/m~`` for linear regression and ``1`` for the PL quadratic).
"""

from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .common import (
    ConfigurationError, InputError, SampleIndexError, ShapeError,
    UnsupportedOperationError, check_matrix, fro_sq,
)
from .logs import setup_logging

logger = setup_logging()

PROBLEM_KINDS = ("regularized-linreg", "quadratic-pl", "nonsmooth-l1")
PARTITION_STRATEGIES = ("random", "sorted")
DATASET_MAGIC = b"BLORADS1"
DATASET_HEADER = np.dtype([("magic", "S8"), ("m", "<i8"), ("n", "<i8"), ("seed", "<i8")])


def regularizer(x: np.ndarray) -> float:
    """Non-convex penalty sum_j x_j^2 / (1 + x_j^2)"""
    x2 = x * x
    return float(np.sum(x2 / (1.0 + x2)))


def regularizer_grad(x: np.ndarray) -> np.ndarray:
    return 2.0 * x / (1.0 + x * x) ** 2


def regularizer_curvature_bound(lo: float = -10.0, hi: float = 10.0, points: int = 200001) -> float:
    """sup |d^2/dx^2 x^2/(1+x^2)| by grid search; the maximum 2 sits at x = 0"""
    x = np.linspace(lo, hi, points)
    x2 = x * x
    return float(np.max(np.abs((2.0 - 6.0 * x2) / (1.0 + x2) ** 3)))


def spectral_norm(D: np.ndarray, iters: int = 100, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value of D by power iteration on D^T D

    Args:
        D: Matrix to measure
        iters: Maximum number of power iterations
        tol: Relative change of the estimate at which to stop
        seed: Seed of the random start vector

    Returns:
        Estimate of ||D||_2
    """
    D = np.asarray(D, dtype=np.float64)
    if D.size == 0 or not np.any(D):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(D.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = D.T @ (D @ v)
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:
            return 0.0
        v = u / norm_u
        new_sigma = float(np.sqrt(norm_u))
        if sigma > 0.0 and abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(np.linalg.norm(D @ v))


def default_shape(features: int) -> Tuple[int, int]:
    """Square matrix shape when features is a perfect square, a single row otherwise"""
    root = int(round(np.sqrt(features)))
    if root * root == features:
        return (root, root)
    return (1, features)


def _positive(value, name: str):
    if value is None or int(value) != value or int(value) <= 0:
        raise ConfigurationError(f"must be a positive integer, got {value}", name)


def _check_shape(shape, features: Optional[int] = None) -> Tuple[int, int]:
    if shape is None or len(shape) != 2:
        raise ConfigurationError(f"must be a pair (m, n), got {shape}", "shape")
    m, n = shape
    _positive(m, "shape.m")
    _positive(n, "shape.n")
    if features is not None and m * n != features:
        raise ConfigurationError(f"{m}x{n} does not hold {features} features", "shape")
    return (int(m), int(n))


@dataclass(frozen=True)
class LinRegConfig:
    """Generator parameters of the regularized linear regression task

    ``reg_weight=None`` means "auto": lambda is set to the spectral norm of the
    generated design matrix.
    """
    samples: int = 500
    features: int = 64
    reg_weight: Optional[float] = None
    noise: float = 50.0
    seed: int = 84
    effective_rank: int = 32
    tail_strength: float = 0.9
    bias: float = 10.0
    informative: float = 0.5
    column_mean: float = 0.0
    column_std: float = 1.0
    shape: Optional[Tuple[int, int]] = None
    sample_count: Optional[int] = None
    solve_optimum: bool = True
    optimum_tol: float = 1e-18
    optimum_max_iter: int = 20000

    def __post_init__(self):
        _positive(self.samples, "samples")
        _positive(self.features, "features")
        _positive(self.effective_rank, "effective_rank")
        if self.reg_weight is not None and self.reg_weight < 0:
            raise ConfigurationError(f"must be non-negative, got {self.reg_weight}", "reg_weight")
        if self.noise < 0:
            raise ConfigurationError(f"must be non-negative, got {self.noise}", "noise")
        if not 0.0 <= self.tail_strength <= 1.0:
            raise ConfigurationError(f"must lie in [0, 1], got {self.tail_strength}", "tail_strength")
        if not 0.0 < self.informative <= 1.0:
            raise ConfigurationError(f"must lie in (0, 1], got {self.informative}", "informative")
        if self.column_std <= 0:
            raise ConfigurationError(f"must be positive, got {self.column_std}", "column_std")
        if self.sample_count is not None:
            _positive(self.sample_count, "sample_count")
            if self.sample_count > self.samples:
                raise ConfigurationError(f"{self.sample_count} exceeds samples={self.samples}", "sample_count")
        object.__setattr__(self, "shape", _check_shape(self.shape or default_shape(self.features), self.features))


@dataclass(frozen=True)
class QuadraticConfig:
    """PL quadratic f(W) = 1/2 ||C vec(W) - d||^2 with spectrum of C^T C in [mu, L]

    ``C`` and ``d`` may be given explicitly; otherwise they are generated from
    ``seed`` with ``rows`` rows and a residual of size ``residual`` orthogonal to
    the range of C (so f* > 0 and sample gradients differ at the optimum).
    """
    shape: Tuple[int, int] = (2, 2)
    rows: Optional[int] = None
    mu: float = 1.0
    L: float = 1.0
    residual: float = 0.0
    seed: int = 0
    sample_count: Optional[int] = None
    C: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    d: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = _check_shape(self.shape)
        object.__setattr__(self, "shape", shape)
        dim = shape[0] * shape[1]
        if self.C is not None:
            C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
            if C.shape[1] != dim:
                raise ConfigurationError(f"C has {C.shape[1]} columns, expected {dim}", "C")
            d = np.zeros(C.shape[0]) if self.d is None else np.asarray(self.d, dtype=np.float64).reshape(-1)
            if d.shape[0] != C.shape[0]:
                raise ConfigurationError(f"d has length {d.shape[0]}, expected {C.shape[0]}", "d")
            object.__setattr__(self, "C", C)
            object.__setattr__(self, "d", d)
            return
        rows = dim if self.rows is None else self.rows
        _positive(rows, "rows")
        if rows < dim:
            raise ConfigurationError(f"{rows} rows cannot give a positive definite C^T C in dimension {dim}", "rows")
        object.__setattr__(self, "rows", int(rows))
        if not 0 < self.mu <= self.L:
            raise ConfigurationError(f"need 0 < mu <= L, got mu={self.mu}, L={self.L}", "mu")
        if self.residual < 0:
            raise ConfigurationError(f"must be non-negative, got {self.residual}", "residual")
        if self.residual > 0 and rows == dim:
            raise ConfigurationError("a positive residual needs more rows than parameters", "residual")
        if self.sample_count is not None:
            _positive(self.sample_count, "sample_count")


@dataclass(frozen=True)
class L1Config:
    """Least absolute deviations f(W) = (1/m) ||D vec(W) - b||_1 with a planted minimizer"""
    shape: Tuple[int, int] = (2, 4)
    rows: int = 40
    seed: int = 0
    planted_scale: float = 1.0
    D: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    W_star: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = _check_shape(self.shape)
        object.__setattr__(self, "shape", shape)
        dim = shape[0] * shape[1]
        if self.D is not None:
            D = np.atleast_2d(np.asarray(self.D, dtype=np.float64))
            if D.shape[1] != dim:
                raise ConfigurationError(f"D has {D.shape[1]} columns, expected {dim}", "D")
            object.__setattr__(self, "D", D)
            object.__setattr__(self, "rows", D.shape[0])
        _positive(self.rows, "rows")
        if self.W_star is not None:
            object.__setattr__(self, "W_star", np.asarray(self.W_star, dtype=np.float64).reshape(shape))


class Problem:
    """Base class for objectives over (m, n) parameter matrices"""

    kind = "abstract"
    smooth = True

    def __init__(self, shape: Tuple[int, int], sample_count: int = 1,
                 smoothness: Optional[float] = None, pl_constant: Optional[float] = None,
                 lipschitz: Optional[float] = None, opt_value: Optional[float] = None,
                 opt_point: Optional[np.ndarray] = None):
        self.shape = (int(shape[0]), int(shape[1]))
        self.sample_count = int(sample_count)
        self.smoothness = smoothness
        self.pl_constant = pl_constant
        self.lipschitz = lipschitz
        self.opt_value = opt_value
        self.opt_point = opt_point
        self.opt_provenance = "analytic"

    @property
    def dims(self) -> Tuple[int, int]:
        return self.shape

    @property
    def dim(self) -> int:
        return self.shape[0] * self.shape[1]

    def eval(self, W: np.ndarray) -> float:
        raise NotImplementedError("Subclasses must implement this method")

    def grad(self, W: np.ndarray) -> np.ndarray:
        raise UnsupportedOperationError(f"{self.kind} problems have no gradient oracle")

    def sample_grad(self, W: np.ndarray, index: int) -> np.ndarray:
        raise UnsupportedOperationError(f"{self.kind} problems have no sample gradient oracle")

    def batch_grad(self, W: np.ndarray, indices: Sequence[int]) -> np.ndarray:
        raise UnsupportedOperationError(f"{self.kind} problems have no sample gradient oracle")

    def subgrad(self, W: np.ndarray) -> np.ndarray:
        raise UnsupportedOperationError(f"{self.kind} problems are smooth, use grad")

    @property
    def component_smoothness(self) -> Optional[float]:
        """Largest smoothness constant over the sample functions f_i"""
        return self.smoothness

    def first_order(self, W: np.ndarray) -> np.ndarray:
        """Gradient for smooth problems, subgradient otherwise"""
        return self.grad(W) if self.smooth else self.subgrad(W)

    def partition(self, M: int, rng: Union[int, np.random.Generator, None] = None,
                  strategy: str = "random") -> List["Problem"]:
        raise UnsupportedOperationError(f"{self.kind} problems cannot be partitioned")

    def check(self, W: np.ndarray) -> np.ndarray:
        return check_matrix(W, self.shape)

    def draw_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Distinct sample indices for one mini-batch"""
        if batch_size > self.sample_count:
            raise ConfigurationError(f"batch size {batch_size} exceeds sample count {self.sample_count}", "batch_size")
        if batch_size == self.sample_count:
            return np.arange(self.sample_count)
        return rng.choice(self.sample_count, size=batch_size, replace=False)


class LeastSquaresProblem(Problem):
    """Finite-sum least squares with an optional non-convex separable penalty"""

    kind = "least-squares"

    def __init__(self, D: np.ndarray, b: np.ndarray, shape: Tuple[int, int], data_weight: float,
                 reg_weight: float = 0.0, blocks: Optional[List[np.ndarray]] = None,
                 smoothness: Optional[float] = None, pl_constant: Optional[float] = None,
                 opt_value: Optional[float] = None, opt_point: Optional[np.ndarray] = None):
        D = np.array(D, dtype=np.float64)
        b = np.array(b, dtype=np.float64).reshape(-1)
        if D.ndim != 2 or D.shape[1] != shape[0] * shape[1]:
            raise ShapeError(f"design matrix {D.shape} does not match parameter shape {shape}")
        if D.shape[0] != b.shape[0]:
            raise ShapeError(f"{D.shape[0]} rows but {b.shape[0]} targets")
        if blocks is None:
            blocks = [np.array([i]) for i in range(D.shape[0])]
        D.flags.writeable = False
        b.flags.writeable = False
        self.D = D
        self.b = b
        self.data_weight = float(data_weight)
        self.reg_weight = float(reg_weight)
        self.blocks = [np.asarray(block, dtype=np.int64) for block in blocks]
        self._component_smoothness: Optional[float] = None
        if smoothness is None:
            smoothness = self.data_weight * spectral_norm(D) ** 2 + self.reg_weight * regularizer_curvature_bound()
        super().__init__(shape, len(self.blocks), smoothness=smoothness, pl_constant=pl_constant,
                         opt_value=opt_value, opt_point=opt_point)

    @property
    def component_smoothness(self) -> float:
        if self.sample_count == 1:
            return self.smoothness
        if self._component_smoothness is None:
            scale = self.sample_count * self.data_weight
            curvature = self.reg_weight * regularizer_curvature_bound() if self.reg_weight else 0.0
            self._component_smoothness = max(
                scale * float(np.linalg.norm(self.D[block], 2)) ** 2 + curvature for block in self.blocks)
        return self._component_smoothness

    def _x(self, W: np.ndarray) -> np.ndarray:
        return self.check(W).reshape(-1)

    def eval(self, W: np.ndarray) -> float:
        x = self._x(W)
        r = self.D @ x - self.b
        value = 0.5 * self.data_weight * float(r @ r)
        if self.reg_weight:
            value += self.reg_weight * regularizer(x)
        return value

    def grad(self, W: np.ndarray) -> np.ndarray:
        x = self._x(W)
        g = self.data_weight * (self.D.T @ (self.D @ x - self.b))
        if self.reg_weight:
            g = g + self.reg_weight * regularizer_grad(x)
        return g.reshape(self.shape)

    def _rows_grad(self, x: np.ndarray, rows: np.ndarray, scale: float) -> np.ndarray:
        Dr = self.D[rows]
        g = scale * (Dr.T @ (Dr @ x - self.b[rows]))
        if self.reg_weight:
            g = g + self.reg_weight * regularizer_grad(x)
        return g.reshape(self.shape)

    def sample_grad(self, W: np.ndarray, index: int) -> np.ndarray:
        if not 0 <= int(index) < self.sample_count:
            raise SampleIndexError(f"sample index {index} outside [0, {self.sample_count})")
        if self.sample_count == 1:
            return self.grad(W)
        return self._rows_grad(self._x(W), self.blocks[int(index)], self.sample_count * self.data_weight)

    def batch_grad(self, W: np.ndarray, indices: Sequence[int]) -> np.ndarray:
        """Average of the sample gradients over a set of distinct indices"""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if indices.size == 0:
            raise ConfigurationError("empty mini-batch", "batch_size")
        if np.any(indices < 0) or np.any(indices >= self.sample_count):
            raise SampleIndexError(f"sample indices outside [0, {self.sample_count})")
        if self.sample_count == 1:
            return self.grad(W)
        rows = np.concatenate([self.blocks[i] for i in indices])
        scale = self.sample_count * self.data_weight / indices.size
        return self._rows_grad(self._x(W), rows, scale)

    def sample_variance(self, W: np.ndarray) -> float:
        """(1/N) sum_i ||grad f_i(W) - grad f(W)||^2 by enumeration"""
        g = self.grad(W)
        return float(np.mean([fro_sq(self.sample_grad(W, i) - g) for i in range(self.sample_count)]))

    def _client(self, rows: np.ndarray, client_blocks: List[np.ndarray], M: int) -> "LeastSquaresProblem":
        position = {int(r): k for k, r in enumerate(rows)}
        local_blocks = [np.array([position[int(r)] for r in block]) for block in client_blocks]
        client = LeastSquaresProblem(self.D[rows], self.b[rows], self.shape, M * self.data_weight,
                                     self.reg_weight, blocks=local_blocks)
        client.kind = self.kind
        client.opt_point, client.opt_value = estimate_optimum(client)
        client.opt_provenance = "analytic" if self.reg_weight == 0 else "empirical"
        return client

    def partition(self, M: int, rng: Union[int, np.random.Generator, None] = None,
                  strategy: str = "random") -> List["Problem"]:
        """Split the samples into M disjoint near-equal clients

        Each client l holds f_l(x) = (M w / 2) ||D_l x - b_l||^2 + lam * reg(x), so
        that the client average is exactly f. ``strategy="sorted"`` orders
        samples by their mean target before splitting, giving heterogeneous
        clients.
        """
        if int(M) != M or M < 1:
            raise ConfigurationError(f"must be a positive integer, got {M}", "clients")
        if M > self.sample_count:
            raise ConfigurationError(f"{M} clients but only {self.sample_count} samples", "clients")
        if strategy not in PARTITION_STRATEGIES:
            raise ConfigurationError(f"unknown strategy '{strategy}', expected one of {PARTITION_STRATEGIES}", "split")
        if M == 1:
            return [self]
        if strategy == "sorted":
            order = np.argsort([float(np.mean(self.b[block])) for block in self.blocks], kind="stable")
        else:
            order = np.random.default_rng(rng).permutation(self.sample_count)
        clients = []
        for chunk in np.array_split(order, M):
            client_blocks = [self.blocks[i] for i in chunk]
            rows = np.concatenate(client_blocks)
            clients.append(self._client(rows, client_blocks, M))
        logger.debug(f"Partitioned {self.sample_count} samples into {M} clients ({strategy})")
        return clients


class RegularizedLinReg(LeastSquaresProblem):
    """Linear regression with the non-convex penalty lam * sum x^2/(1+x^2)"""

    kind = "regularized-linreg"


class QuadraticPL(LeastSquaresProblem):
    """Strongly convex (hence PL) quadratic with exact constants"""

    kind = "quadratic-pl"


class NonsmoothL1(Problem):
    """Convex non-smooth f(x) = w ||D x - b||_1 with w = 1/m for the full problem"""

    kind = "nonsmooth-l1"
    smooth = False

    def __init__(self, D: np.ndarray, b: np.ndarray, shape: Tuple[int, int], data_weight: float,
                 opt_point: Optional[np.ndarray] = None):
        D = np.array(D, dtype=np.float64)
        b = np.array(b, dtype=np.float64).reshape(-1)
        if D.ndim != 2 or D.shape[1] != shape[0] * shape[1]:
            raise ShapeError(f"design matrix {D.shape} does not match parameter shape {shape}")
        D.flags.writeable = False
        b.flags.writeable = False
        self.D = D
        self.b = b
        self.data_weight = float(data_weight)
        lipschitz = self.data_weight * float(np.sum(np.linalg.norm(D, axis=1)))
        super().__init__(shape, D.shape[0], lipschitz=lipschitz, opt_point=opt_point)
        if opt_point is not None:
            self.opt_value = self.eval(opt_point)

    def eval(self, W: np.ndarray) -> float:
        x = self.check(W).reshape(-1)
        return self.data_weight * float(np.sum(np.abs(self.D @ x - self.b)))

    def subgrad(self, W: np.ndarray) -> np.ndarray:
        """Subgradient with the convention sign(0) = 0 at kinks"""
        x = self.check(W).reshape(-1)
        return (self.data_weight * (self.D.T @ np.sign(self.D @ x - self.b))).reshape(self.shape)

    def partition(self, M: int, rng: Union[int, np.random.Generator, None] = None,
                  strategy: str = "random") -> List["Problem"]:
        if int(M) != M or M < 1:
            raise ConfigurationError(f"must be a positive integer, got {M}", "clients")
        if M > self.sample_count:
            raise ConfigurationError(f"{M} clients but only {self.sample_count} samples", "clients")
        if strategy not in PARTITION_STRATEGIES:
            raise ConfigurationError(f"unknown strategy '{strategy}', expected one of {PARTITION_STRATEGIES}", "split")
        if M == 1:
            return [self]
        order = (np.argsort(self.b, kind="stable") if strategy == "sorted"
                 else np.random.default_rng(rng).permutation(self.sample_count))
        return [NonsmoothL1(self.D[rows], self.b[rows], self.shape, M * self.data_weight, opt_point=self.opt_point)
                for rows in np.array_split(order, M)]


def minimize_full_gradient(problem: Problem, W0: np.ndarray, tol: float = 1e-18,
                           max_iter: int = 20000) -> Tuple[np.ndarray, float, bool]:
    """Plain gradient descent with step 1/L until ||grad f||^2 <= tol

    Returns:
        Tuple of (final point, final value, converged flag)
    """
    if not problem.smoothness:
        raise UnsupportedOperationError("full-gradient minimization needs a smooth problem with known L")
    W = np.array(W0, dtype=np.float64)
    step = 1.0 / problem.smoothness
    for _ in range(max_iter):
        g = problem.grad(W)
        if fro_sq(g) <= tol:
            return W, problem.eval(W), True
        W = W - step * g
    converged = fro_sq(problem.grad(W)) <= tol
    return W, problem.eval(W), converged


def estimate_optimum(problem: LeastSquaresProblem, tol: float = 1e-20,
                     max_iter: int = 100000) -> Tuple[np.ndarray, float]:
    """Minimizer and minimum: least-squares solve without penalty, descent otherwise"""
    if problem.reg_weight == 0:
        x, *_ = np.linalg.lstsq(problem.D, problem.b, rcond=None)
        W = x.reshape(problem.shape)
        return W, problem.eval(W)
    W, value, converged = minimize_full_gradient(problem, np.zeros(problem.shape), tol, max_iter)
    if not converged:
        logger.warning(f"Optimum estimate stopped after {max_iter} iterations at "
                       f"||grad||^2 = {fro_sq(problem.grad(W)):.3e}")
    return W, value


def dissimilarity(problem: Problem, clients: List[Problem]) -> float:
    """Difference at the optimum f* - (1/M) sum_l f_l*"""
    if problem.opt_value is None or any(c.opt_value is None for c in clients):
        raise UnsupportedOperationError("dissimilarity needs f* of the problem and of every client")
    return float(problem.opt_value - np.mean([c.opt_value for c in clients]))


def generate_regression(cfg: LinRegConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian-factor low-rank design with noisy linear targets

    The singular profile mixes a bell-shaped low-rank part of width
    ``effective_rank`` with an exponential tail weighted by ``tail_strength``;
    columns are standardized and then rescaled to ``column_mean``/``column_std``.
    """
    rng = np.random.default_rng(cfg.seed)
    k = min(cfg.samples, cfg.features)
    U, _ = np.linalg.qr(rng.standard_normal((cfg.samples, k)))
    V, _ = np.linalg.qr(rng.standard_normal((cfg.features, k)))
    i = np.arange(k, dtype=np.float64)
    spectrum = ((1.0 - cfg.tail_strength) * np.exp(-(i / cfg.effective_rank) ** 2)
                + cfg.tail_strength * np.exp(-0.1 * i / cfg.effective_rank))
    X = (U * spectrum) @ V.T
    informative = max(1, int(round(cfg.informative * cfg.features)))
    coef = np.zeros(cfg.features)
    coef[rng.permutation(cfg.features)[:informative]] = 100.0 * rng.uniform(size=informative)
    b = X @ coef + cfg.bias + cfg.noise * rng.standard_normal(cfg.samples)
    std = X.std(axis=0)
    std[std == 0.0] = 1.0
    D = (X - X.mean(axis=0)) / std
    D = D * cfg.column_std + cfg.column_mean
    return D, b


def _blocks(rows: int, sample_count: Optional[int]) -> Optional[List[np.ndarray]]:
    if sample_count is None or sample_count == rows:
        return None
    return np.array_split(np.arange(rows), sample_count)


def linreg_from_data(D: np.ndarray, b: np.ndarray, cfg: LinRegConfig) -> RegularizedLinReg:
    lam = spectral_norm(D) if cfg.reg_weight is None else float(cfg.reg_weight)
    problem = RegularizedLinReg(D, b, cfg.shape, 1.0 / D.shape[0], lam, blocks=_blocks(D.shape[0], cfg.sample_count))
    if cfg.solve_optimum:
        W, value, converged = minimize_full_gradient(problem, np.zeros(cfg.shape), cfg.optimum_tol, cfg.optimum_max_iter)
        problem.opt_point, problem.opt_value = W, value
        problem.opt_provenance = "empirical"
        if not converged:
            logger.warning(f"Reference optimum not converged after {cfg.optimum_max_iter} iterations")
    logger.debug(f"Built regularized-linreg {D.shape} with lambda={lam:.6g}, L={problem.smoothness:.6g}")
    return problem


def _quadratic(cfg: QuadraticConfig) -> QuadraticPL:
    m, n = cfg.shape
    dim = m * n
    if cfg.C is not None:
        C, d = cfg.C, cfg.d
        eig = np.linalg.eigvalsh(C.T @ C)
        if eig[0] <= 0:
            raise ConfigurationError("C^T C must be positive definite", "C")
        mu, L = float(eig[0]), float(eig[-1])
    else:
        rng = np.random.default_rng(cfg.seed)
        Q, _ = np.linalg.qr(rng.standard_normal((cfg.rows, cfg.rows)))
        R, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        singular = np.sqrt(np.linspace(cfg.mu, cfg.L, dim))
        C = (Q[:, :dim] * singular) @ R.T
        w_star = rng.standard_normal(dim)
        d = C @ w_star
        if cfg.residual > 0:
            # orthogonal to range(C), so the minimizer stays at w_star
            z = rng.standard_normal(cfg.rows - dim)
            d = d + cfg.residual * (Q[:, dim:] @ (z / np.linalg.norm(z)))
        mu, L = float(cfg.mu), float(cfg.L)
    problem = QuadraticPL(C, d, cfg.shape, 1.0, 0.0, blocks=_blocks(C.shape[0], cfg.sample_count),
                          smoothness=L, pl_constant=mu)
    x_star = np.linalg.solve(C.T @ C, C.T @ d)
    problem.opt_point = x_star.reshape(cfg.shape)
    problem.opt_value = problem.eval(problem.opt_point)
    return problem


def _l1(cfg: L1Config) -> NonsmoothL1:
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.shape[0] * cfg.shape[1]
    D = cfg.D if cfg.D is not None else rng.standard_normal((cfg.rows, dim))
    W_star = cfg.W_star if cfg.W_star is not None else cfg.planted_scale * rng.standard_normal(cfg.shape)
    b = D @ W_star.reshape(-1)
    return NonsmoothL1(D, b, cfg.shape, 1.0 / D.shape[0], opt_point=W_star)


CONFIG_TYPES = {
    "regularized-linreg": LinRegConfig,
    "quadratic-pl": QuadraticConfig,
    "nonsmooth-l1": L1Config,
}


def coerce_config(kind: str, config: Union[None, Dict[str, Any], LinRegConfig, QuadraticConfig, L1Config]):
    """Turn a plain mapping into the kind's frozen config dataclass"""
    if kind not in CONFIG_TYPES:
        raise ConfigurationError(f"unknown problem kind '{kind}', expected one of {PROBLEM_KINDS}", "problem.kind")
    cls = CONFIG_TYPES[kind]
    if isinstance(config, cls):
        return config
    config = dict(config or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(config) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys {unknown} for kind '{kind}'", "problem")
    if config.get("shape") is not None:
        config["shape"] = tuple(config["shape"])
    return cls(**config)


def make_problem(kind: str, config=None) -> Problem:
    """Build a problem of the given kind from its generator config

    Args:
        kind: One of regularized-linreg, quadratic-pl, nonsmooth-l1
        config: Kind-specific config dataclass or mapping of its fields

    Returns:
        Problem with all oracles of its kind and every constant that is constructible
    """
    cfg = coerce_config(kind, config)
    if kind == "regularized-linreg":
        D, b = generate_regression(cfg)
        return linreg_from_data(D, b, cfg)
    if kind == "quadratic-pl":
        return _quadratic(cfg)
    return _l1(cfg)


def make_initial_point(problem: Problem, how: str = "zeros", seed: int = 0, scale: float = 1.0,
                       pretrain: Optional[LinRegConfig] = None, pretrain_tol: float = 1e-8,
                       pretrain_max_iter: int = 100000) -> np.ndarray:
    """Starting matrix W0

    ``pretrain`` solves a separate regularized regression task (same shape) by
    full-gradient descent until ||grad||^2 <= pretrain_tol and starts from its
    solution, mimicking a pre-trained model that is then fine-tuned.
    """
    if how == "zeros":
        return np.zeros(problem.shape)
    if how == "gaussian":
        return scale * np.random.default_rng(seed).standard_normal(problem.shape)
    if how == "shifted-optimum":
        if problem.opt_point is None:
            raise ConfigurationError("shifted-optimum needs a known minimizer", "problem.init")
        return problem.opt_point + scale * np.random.default_rng(seed).standard_normal(problem.shape)
    if how == "pretrain":
        if pretrain is None:
            raise ConfigurationError("pretrain initialization needs a problem.pretrain section", "problem.pretrain")
        if tuple(pretrain.shape) != tuple(problem.shape):
            raise ConfigurationError(f"pretraining shape {pretrain.shape} differs from {problem.shape}", "problem.pretrain.shape")
        D, b = generate_regression(pretrain)
        base = linreg_from_data(D, b, LinRegConfig(**{**_as_dict(pretrain), "solve_optimum": False}))
        W, value, converged = minimize_full_gradient(base, np.zeros(problem.shape), pretrain_tol, pretrain_max_iter)
        logger.info(f"Pre-training finished at f={value:.6g} (converged={converged})")
        return W
    raise ConfigurationError(f"unknown initialization '{how}'", "problem.init")


def _as_dict(cfg) -> Dict[str, Any]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def save_dataset(path: str, D: np.ndarray, b: np.ndarray, seed: int) -> None:
    """Write D and b as little-endian float64 after a 32-byte header (magic, m, n, seed)"""
    D = np.ascontiguousarray(D, dtype="<f8")
    b = np.ascontiguousarray(b, dtype="<f8").reshape(-1)
    if D.ndim != 2 or b.shape[0] != D.shape[0]:
        raise ShapeError(f"dataset shapes {D.shape} and {b.shape} are inconsistent")
    header = np.zeros(1, dtype=DATASET_HEADER)
    header[0] = (DATASET_MAGIC, D.shape[0], D.shape[1], seed)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(D.tobytes())
        f.write(b.tobytes())


def load_dataset(path: str) -> Tuple[np.ndarray, np.ndarray, int]:
    """Read a dataset written by save_dataset

    Returns:
        Tuple of (D, b, seed)
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size < DATASET_HEADER.itemsize:
        raise InputError(f"{path}: file too short for a dataset header")
    header = np.frombuffer(raw[:DATASET_HEADER.itemsize].tobytes(), dtype=DATASET_HEADER)[0]
    if bytes(header["magic"]) != DATASET_MAGIC:
        raise InputError(f"{path}: bad magic {bytes(header['magic'])!r}")
    m, n = int(header["m"]), int(header["n"])
    values = np.frombuffer(raw[DATASET_HEADER.itemsize:].tobytes(), dtype="<f8")
    if values.size != m * n + m:
        raise InputError(f"{path}: expected {m * n + m} values, found {values.size}")
    return values[:m * n].reshape(m, n).copy(), values[m * n:].copy(), int(header["seed"])
