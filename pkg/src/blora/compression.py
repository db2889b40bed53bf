#!/usr/bin/env python3
"""Unbiased and contractive compression operators on matrices.

Matrices are compressed as their row-major flattening, so the Frobenius norm
of a matrix is the Euclidean norm of the compressed vector.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Type

import numpy as np

from .common import ConfigurationError, fro_sq
from .logs import setup_logging

logger = setup_logging()


class Compressor:
    """Base class for compression operators over d-dimensional inputs"""

    kind = "abstract"
    unbiased = False
    contractive = False

    def __init__(self, dim: int):
        if int(dim) != dim or dim < 1:
            raise ConfigurationError(f"dimension must be a positive integer, got {dim}", "compressor.dim")
        self.dim = int(dim)

    @property
    def omega(self) -> Optional[float]:
        """Variance parameter of an unbiased operator, None otherwise"""
        return None

    @property
    def beta(self) -> Optional[float]:
        """Contraction parameter of a contractive operator, None otherwise"""
        return None

    def compress(self, X: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.size != self.dim:
            raise ConfigurationError(f"input has {X.size} entries, compressor expects {self.dim}", "compressor.dim")
        return self._compress(X.reshape(-1), rng).reshape(X.shape)

    def _compress(self, x: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
        raise NotImplementedError("Subclasses must implement this method")

    def comm_scalars(self) -> float:
        """Scalars sent per compressed matrix, one index counting as one scalar"""
        raise NotImplementedError("Subclasses must implement this method")

    def describe(self) -> str:
        return self.kind


class IdentityCompressor(Compressor):
    kind = "identity"
    unbiased = True
    contractive = True

    @property
    def omega(self) -> float:
        return 0.0

    @property
    def beta(self) -> float:
        return 1.0

    def _compress(self, x, rng):
        return x.copy()

    def comm_scalars(self) -> float:
        return self.dim


class _SparsifyingCompressor(Compressor):
    def __init__(self, dim: int, k: int):
        super().__init__(dim)
        if k is None or int(k) != k or k < 1:
            raise ConfigurationError(f"k must be a positive integer, got {k}", "compressor.k")
        if k > self.dim:
            raise ConfigurationError(f"k={k} exceeds the dimension {self.dim}", "compressor.k")
        self.k = int(k)

    def comm_scalars(self) -> float:
        return 2 * self.k

    def describe(self) -> str:
        return f"{self.kind}(k={self.k})"


class RandK(_SparsifyingCompressor):
    """Keep k coordinates chosen uniformly without replacement, scaled by d/k"""

    kind = "rand-k"
    unbiased = True

    @property
    def omega(self) -> float:
        return self.dim / self.k - 1.0

    def _compress(self, x, rng):
        if rng is None:
            raise ConfigurationError("rand-k needs a random generator", "compressor")
        return self._keep(x, rng.choice(self.dim, size=self.k, replace=False))

    def _keep(self, x: np.ndarray, indices) -> np.ndarray:
        out = np.zeros_like(x)
        out[indices] = x[indices] * (self.dim / self.k)
        return out

    def compress_indices(self, X: np.ndarray, indices) -> np.ndarray:
        """Output for a given index set, used to enumerate all outcomes"""
        X = np.asarray(X, dtype=np.float64)
        return self._keep(X.reshape(-1), np.asarray(indices, dtype=np.int64)).reshape(X.shape)


class TopK(_SparsifyingCompressor):
    """Keep the k largest magnitudes, ties going to the lowest flat index"""

    kind = "top-k"
    contractive = True

    @property
    def beta(self) -> float:
        return self.k / self.dim

    def _compress(self, x, rng):
        keep = np.argsort(-np.abs(x), kind="stable")[:self.k]
        out = np.zeros_like(x)
        out[keep] = x[keep]
        return out


class StochasticDither(Compressor):
    """Random rounding of |x_i| to the s-level grid of [0, max|x|], signs kept

    Each entry moves to one of its two neighbouring levels with probabilities
    that preserve its expectation. The per-entry variance is at most
    min(delta^2/4, delta |x_i|) with delta = max|x|/s, which gives
    omega = min(d/(4 s^2), sqrt(d)/s).
    """

    kind = "stochastic-dither"
    unbiased = True

    def __init__(self, dim: int, levels: int):
        super().__init__(dim)
        if levels is None or int(levels) != levels or levels < 1:
            raise ConfigurationError(f"levels must be a positive integer, got {levels}", "compressor.levels")
        self.levels = int(levels)

    @property
    def omega(self) -> float:
        return min(self.dim / (4.0 * self.levels ** 2), math.sqrt(self.dim) / self.levels)

    def _compress(self, x, rng):
        if rng is None:
            raise ConfigurationError("stochastic-dither needs a random generator", "compressor")
        scale = float(np.max(np.abs(x))) if x.size else 0.0
        if scale == 0.0:
            return np.zeros_like(x)
        level = np.abs(x) / scale * self.levels
        low = np.floor(level)
        up = rng.random(x.shape) < (level - low)
        return np.sign(x) * (low + up) * (scale / self.levels)

    def comm_scalars(self) -> float:
        return self.dim * math.log2(self.levels + 1) / 64.0

    def describe(self) -> str:
        return f"{self.kind}(s={self.levels})"


class ScaledCompressor(Compressor):
    """Unbiased operator divided by omega + 1, contractive with beta = 1/(omega + 1)"""

    contractive = True

    def __init__(self, base: Compressor):
        if not base.unbiased:
            raise ConfigurationError(f"only unbiased operators can be scaled, got {base.kind}", "compressor.scaled")
        super().__init__(base.dim)
        self.base = base
        self.kind = f"scaled-{base.kind}"

    @property
    def beta(self) -> float:
        return 1.0 / (self.base.omega + 1.0)

    def _compress(self, x, rng):
        return self.base._compress(x, rng) / (self.base.omega + 1.0)

    def comm_scalars(self) -> float:
        return self.base.comm_scalars()

    def describe(self) -> str:
        return f"scaled-{self.base.describe()}"


COMPRESSORS: Dict[str, Type[Compressor]] = {
    IdentityCompressor.kind: IdentityCompressor,
    RandK.kind: RandK,
    TopK.kind: TopK,
    StochasticDither.kind: StochasticDither,
}


def make_compressor(kind: str, dim: int, k: Optional[int] = None, levels: Optional[int] = None,
                    scaled: bool = False) -> Compressor:
    """Build a compressor by kind name

    Args:
        kind: identity, rand-k, top-k or stochastic-dither
        dim: Number of entries d = m * n of the compressed matrices
        k: Kept coordinates for rand-k and top-k
        levels: Number of levels s for stochastic-dither
        scaled: Divide an unbiased operator by omega + 1 to make it contractive
    """
    if kind not in COMPRESSORS:
        raise ConfigurationError(f"unknown compressor '{kind}', expected one of {sorted(COMPRESSORS)}", "compressor.kind")
    if kind in ("rand-k", "top-k"):
        compressor = COMPRESSORS[kind](dim, k)
    elif kind == "stochastic-dither":
        compressor = StochasticDither(dim, levels)
    else:
        compressor = IdentityCompressor(dim)
    return ScaledCompressor(compressor) if scaled else compressor


def comm_scalars(c: Compressor) -> float:
    return c.comm_scalars()


@dataclass(frozen=True)
class CompressorReport:
    """Worst observed behaviour of a compressor over a set of probes

    ``bias`` is max ||E Q(X) - X|| / ||X||, ``variance_ratio`` is
    max E||Q(X) - X||^2 / ||X||^2 (an empirical omega for unbiased operators,
    an empirical 1 - beta for contractive ones).
    """
    kind: str
    probes: int
    bias: float
    variance_ratio: float
    declared_omega: Optional[float]
    declared_beta: Optional[float]
    exact: bool

    @property
    def empirical_omega(self) -> Optional[float]:
        return self.variance_ratio if self.declared_omega is not None else None

    @property
    def empirical_beta(self) -> Optional[float]:
        return 1.0 - self.variance_ratio if self.declared_beta is not None else None

    @property
    def passed(self) -> bool:
        if self.declared_omega is not None and self.declared_beta is None:
            return self.variance_ratio <= self.declared_omega * (1.0 + 1e-9) + 1e-12
        if self.declared_beta is not None:
            return self.variance_ratio <= 1.0 - self.declared_beta + 1e-12
        return False


def _outcomes(c: Compressor, X: np.ndarray, trials: int, rng: np.random.Generator):
    """All equally likely outputs when enumerable, Monte-Carlo draws otherwise"""
    if isinstance(c, RandK) and math.comb(c.dim, c.k) <= trials:
        return [c.compress_indices(X, idx) for idx in itertools.combinations(range(c.dim), c.k)], True
    if isinstance(c, (IdentityCompressor, TopK)):
        return [c.compress(X, rng)], True
    return [c.compress(X, rng) for _ in range(trials)], False


def verify_compressor(c: Compressor, probes: int, dims: Tuple[int, int], rng: np.random.Generator,
                      trials: int = 2000) -> CompressorReport:
    """Measure bias and relative second moment of a compressor on random probes

    Rand-k is enumerated over all C(d, k) index sets when there are at most
    ``trials`` of them; deterministic operators need a single evaluation.
    """
    if probes < 1:
        raise ConfigurationError(f"probes must be at least 1, got {probes}", "probes")
    if dims[0] * dims[1] != c.dim:
        raise ConfigurationError(f"dims {dims} do not match compressor dimension {c.dim}", "dims")
    bias, ratio, exact = 0.0, 0.0, True
    for _ in range(probes):
        X = rng.standard_normal(dims)
        norm_sq = fro_sq(X)
        outputs, enumerated = _outcomes(c, X, trials, rng)
        exact = exact and enumerated
        mean = np.mean(outputs, axis=0)
        bias = max(bias, math.sqrt(fro_sq(mean - X) / norm_sq))
        ratio = max(ratio, float(np.mean([fro_sq(Q - X) for Q in outputs])) / norm_sq)
    report = CompressorReport(c.describe(), probes, bias, ratio, c.omega, c.beta, exact)
    logger.debug(f"{report.kind}: bias={bias:.3e}, ratio={ratio:.6g}, exact={exact}")
    return report


def require_unbiased(c: Compressor, method: str) -> None:
    if not c.unbiased:
        raise ConfigurationError(f"{method} needs an unbiased compressor, got {c.describe()}", "method.compressor.kind")


def require_contractive(c: Compressor, method: str) -> None:
    if not c.contractive:
        raise ConfigurationError(f"{method} needs a contractive compressor, got {c.describe()}; "
                                 f"set scaled: true to use an unbiased one", "method.compressor.kind")
