#!/usr/bin/env python3
"""Assumption constants, stepsize bounds, rate bounds and assumption probes.

Theorem names used throughout: ``gd``, ``sgd``, ``mvr``, ``page``, ``qgd``,
``marina``, ``ef21`` for the smooth non-convex results, the same names with a
``-pl`` suffix for the Polyak-Lojasiewicz results, and ``nonsmooth-constant`` /
``nonsmooth-polyak`` for the convex non-smooth results.
"""

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .common import ConfigurationError, UnsupportedOperationError, fro_sq, server_average
from .compression import Compressor
from .logs import setup_logging
from .problems import Problem, dissimilarity
from .sketch import SketchSpec, enumerate_expected_projection, estimate_expected_projection, spectral_weights

logger = setup_logging()

PARAM_ALIASES = {
    "lambda_min": "lmin", "lambda_max": "lmax", "sigma": "sigma2", "sigma_sq": "sigma2",
    "Delta0": "delta0", "Delta_star": "delta_star", "G0": "gap0", "G0_hat": "gap0_hat",
}


@dataclass(frozen=True)
class TheoryParams:
    """Every constant a stepsize or rate statement may consume

    Absent constants are None; ``missing`` maps a field to the reason it could
    not be derived. ``provenance`` labels each present field "analytic" or
    "empirical", and ``errors`` holds standard errors of empirical fields.
    """
    L: Optional[float] = None
    mu: Optional[float] = None
    sigma2: Optional[float] = None
    L0: Optional[float] = None
    A1: Optional[float] = None
    B1: Optional[float] = None
    C1: Optional[float] = None
    omega: Optional[float] = None
    beta: Optional[float] = None
    q: Optional[float] = None
    b: Optional[float] = None
    M: Optional[float] = None
    T: Optional[float] = None
    lmin: Optional[float] = None
    lmax: Optional[float] = None
    delta0: Optional[float] = None
    delta_star: Optional[float] = None
    gap0: Optional[float] = None
    gap0_hat: Optional[float] = None
    R0: Optional[float] = None
    alpha: Optional[float] = None
    provenance: Dict[str, str] = field(default_factory=dict, compare=False)
    missing: Dict[str, str] = field(default_factory=dict, compare=False)
    errors: Dict[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in self.constant_names():
            value = getattr(self, name)
            if value is None:
                continue
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"must be a finite non-negative number, got {value}", name)
        if self.lmin is not None and self.lmax is not None and self.lmin > self.lmax * (1 + 1e-12):
            raise ConfigurationError(f"lambda_min={self.lmin} exceeds lambda_max={self.lmax}", "lmin")

    @classmethod
    def constant_names(cls) -> List[str]:
        return [f.name for f in fields(cls) if f.name not in ("provenance", "missing", "errors")]

    @classmethod
    def from_mapping(cls, values: Dict[str, object], provenance: str = "analytic") -> "TheoryParams":
        """Build from loosely named key/value pairs such as ``lambda_max=1``"""
        known = set(cls.constant_names())
        clean = {}
        for key, value in values.items():
            name = PARAM_ALIASES.get(key, key)
            if name not in known:
                raise ConfigurationError(f"unknown constant '{key}'", "params")
            try:
                clean[name] = float(value)
            except (TypeError, ValueError):
                raise ConfigurationError(f"not a number: {value!r}", key)
        return cls(**clean, provenance={k: provenance for k in clean})

    def require(self, names: Sequence[str], theorem: str) -> Tuple[float, ...]:
        values = []
        for name in names:
            value = getattr(self, name)
            if value is None:
                reason = self.missing.get(name)
                suffix = f" ({reason})" if reason else ""
                raise ConfigurationError(f"theorem '{theorem}' needs constant '{name}'{suffix}", name)
            values.append(value)
        return tuple(values)

    def label(self, names: Sequence[str]) -> str:
        """"empirical" if any of the named constants is empirical"""
        return "empirical" if any(self.provenance.get(n) == "empirical" for n in names) else "analytic"

    def updated(self, provenance: str = "analytic", **values) -> "TheoryParams":
        merged = dict(self.provenance)
        merged.update({k: provenance for k in values})
        return replace(self, provenance=merged, **values)

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in self.constant_names()}


def _div(num: float, den: float) -> float:
    if den == 0.0:
        return math.inf if num > 0 else 0.0
    return num / den


def _ef21_root(beta: float) -> float:
    return 1.0 - math.sqrt(1.0 - beta)


def _sgd(p):
    L, A1, B1, lmax, lmin, T = p
    return min(_div(1.0, math.sqrt(L * A1 * lmax * T)), _div(lmin, L * B1 * lmax))


def _sgd_pl(p):
    L, A1, B1, mu, lmax, lmin = p
    return min(_div(mu * lmin, 2.0 * L * A1 * lmax), 2.0 / (mu * lmin), _div(lmin, L * B1 * lmax))


def _mvr(p):
    L, b, lmax = p
    return 1.0 / (L * (1.0 + math.sqrt(2.0 * lmax * (1.0 - b) ** 2 / b)))


def _mvr_pl(p):
    L, b, lmax, mu, lmin = p
    return min(1.0 / (L * (1.0 + math.sqrt(2.0 * (1.0 - b) ** 2 * lmax / (b * (2.0 - b))))), b / (2.0 * mu * lmin))


def _page(p):
    L, q, lmax = p
    return 1.0 / (L * (1.0 + math.sqrt((1.0 - q) / q * lmax)))


def _page_pl(p):
    L, q, lmax, mu, lmin = p
    return min(1.0 / (L * (1.0 + 2.0 * math.sqrt((1.0 - q) / q * lmax))), q / (2.0 * mu * lmin))


def _qgd(p):
    L, omega, M, lmax, lmin, T = p
    return min(_div(1.0, L * math.sqrt(omega / M * lmax * T)), lmin / (L * lmax))


def _qgd_pl(p):
    L, omega, M, lmax, lmin, mu = p
    return min(_div(mu * lmin, 2.0 * L ** 2 * (omega / M) * lmax), 2.0 / (mu * lmin), lmin / (L * lmax))


def _marina(p):
    L, q, omega, M, lmax = p
    return 1.0 / (L * (1.0 + math.sqrt(lmax * (1.0 - q) / q * omega / M)))


def _marina_pl(p):
    L, q, omega, M, lmax, mu, lmin = p
    return min(1.0 / (L * (1.0 + math.sqrt(2.0 * lmax * (1.0 - q) / q * omega / M))), q / (2.0 * mu * lmin))


def _ef21(p):
    L, beta, lmax = p
    return 1.0 / (L * (1.0 + math.sqrt(lmax * (1.0 - beta)) / _ef21_root(beta)))


def _ef21_pl(p):
    L, beta, lmax, mu, lmin = p
    return min(1.0 / (L * (1.0 + math.sqrt(2.0 * lmax * (1.0 - beta)) / _ef21_root(beta))),
               (1.0 + math.sqrt(1.0 - beta)) / (2.0 * mu * lmin))


def _nonsmooth_constant(p):
    R0, L0, alpha, T = p
    return _div(R0, L0 * math.sqrt(alpha * T))


STEPSIZE_RULES: Dict[str, Tuple[Tuple[str, ...], Callable]] = {
    "gd": (("L",), lambda p: 1.0 / p[0]),
    "gd-pl": (("L",), lambda p: 1.0 / p[0]),
    "sgd": (("L", "A1", "B1", "lmax", "lmin", "T"), _sgd),
    "sgd-pl": (("L", "A1", "B1", "mu", "lmax", "lmin"), _sgd_pl),
    "mvr": (("L", "b", "lmax"), _mvr),
    "mvr-pl": (("L", "b", "lmax", "mu", "lmin"), _mvr_pl),
    "page": (("L", "q", "lmax"), _page),
    "page-pl": (("L", "q", "lmax", "mu", "lmin"), _page_pl),
    "qgd": (("L", "omega", "M", "lmax", "lmin", "T"), _qgd),
    "qgd-pl": (("L", "omega", "M", "lmax", "lmin", "mu"), _qgd_pl),
    "marina": (("L", "q", "omega", "M", "lmax"), _marina),
    "marina-pl": (("L", "q", "omega", "M", "lmax", "mu", "lmin"), _marina_pl),
    "ef21": (("L", "beta", "lmax"), _ef21),
    "ef21-pl": (("L", "beta", "lmax", "mu", "lmin"), _ef21_pl),
    "nonsmooth-constant": (("R0", "L0", "alpha", "T"), _nonsmooth_constant),
}

THEOREMS = tuple(STEPSIZE_RULES) + ("nonsmooth-polyak",)


def theorem_for(estimator: str, pl: bool = False) -> str:
    """Theorem covering a base estimator, in its PL form when requested"""
    name = f"{estimator}-pl" if pl else estimator
    if name not in STEPSIZE_RULES:
        raise ConfigurationError(f"no theorem covers estimator '{estimator}'", "method.stepsize.theorem")
    return name


def _check_ranges(theorem: str, params: TheoryParams):
    if params.q is not None and not 0.0 < params.q <= 1.0:
        raise ConfigurationError(f"q must lie in (0, 1], got {params.q}", "q")
    if params.b is not None and not 0.0 < params.b <= 1.0:
        raise ConfigurationError(f"b must lie in (0, 1], got {params.b}", "b")
    if params.beta is not None and not 0.0 < params.beta <= 1.0:
        raise ConfigurationError(f"beta must lie in (0, 1], got {params.beta}", "beta")
    for name in ("L", "M", "lmin"):
        if name in STEPSIZE_RULES.get(theorem, ((),))[0] and getattr(params, name) == 0:
            raise ConfigurationError(f"theorem '{theorem}' needs a positive '{name}'", name)


def theoretical_stepsize(theorem: str, params: TheoryParams) -> float:
    """Largest stepsize the named theorem allows

    Raises:
        ConfigurationError: Unknown theorem, or a constant the theorem needs is
            absent (the message names both)
    """
    if theorem == "nonsmooth-polyak":
        raise ConfigurationError("the Polyak stepsize is adaptive, use stepsize policy 'polyak'", "theorem")
    if theorem not in STEPSIZE_RULES:
        raise ConfigurationError(f"unknown theorem '{theorem}', expected one of {sorted(STEPSIZE_RULES)}", "theorem")
    names, rule = STEPSIZE_RULES[theorem]
    values = params.require(names, theorem)
    _check_ranges(theorem, params)
    gamma = float(rule(values))
    logger.debug(f"Stepsize of {theorem}: {gamma:.6g} ({params.label(names)})")
    return gamma


def stepsize_provenance(theorem: str, params: TheoryParams) -> str:
    if theorem not in STEPSIZE_RULES:
        return "analytic"
    return params.label(STEPSIZE_RULES[theorem][0])


def rate_bound(theorem: str, params: TheoryParams, gamma: Optional[float] = None) -> float:
    """Right-hand side of the theorem's convergence statement after T steps

    Non-convex theorems bound the sampled-iterate E||grad f||^2, PL theorems
    E[f(W^T) - f*], and the non-smooth ones E[f(W_avg) - f*].
    """
    if theorem == "nonsmooth-polyak":
        R0, L0, alpha, T = params.require(("R0", "L0", "alpha", "T"), theorem)
        return _div(R0 * L0, math.sqrt(alpha * T))
    if theorem not in STEPSIZE_RULES:
        raise ConfigurationError(f"unknown theorem '{theorem}'", "theorem")
    if gamma is None:
        gamma = theoretical_stepsize(theorem, params)
    if theorem == "nonsmooth-constant":
        R0, L0, alpha, T = params.require(("R0", "L0", "alpha", "T"), theorem)
        return R0 ** 2 / (2.0 * gamma * alpha * T) + gamma * L0 ** 2 / 2.0
    base = theorem[:-3] if theorem.endswith("-pl") else theorem
    lmin, lmax, delta0, T = params.require(("lmin", "lmax", "delta0", "T"), theorem)
    kappa = lmax / lmin
    if not theorem.endswith("-pl"):
        head = 2.0 * delta0 / (gamma * lmin * T)
        if base == "gd":
            return head
        if base == "sgd":
            L, C1 = params.require(("L", "C1"), theorem)
            return 3.0 * head + gamma * L * C1 * kappa
        if base == "qgd":
            L, omega, M, dstar = params.require(("L", "omega", "M", "delta_star"), theorem)
            return 3.0 * head + 2.0 * gamma * L * omega * dstar / M * kappa
        if base == "mvr":
            b, gap0, sigma2 = params.require(("b", "gap0", "sigma2"), theorem)
            return head + gap0 / (b * (2.0 - b) * T) * kappa + 2.0 * b * sigma2 / (2.0 - b) * kappa
        if base in ("page", "marina"):
            q, gap0 = params.require(("q", "gap0"), theorem)
            return head + gap0 / (q * T) * kappa
        beta, gap0_hat = params.require(("beta", "gap0_hat"), theorem)
        return head + gap0_hat / (_ef21_root(beta) * T) * kappa
    (mu,) = params.require(("mu",), theorem)
    contraction = 1.0 - gamma * mu * lmin
    if base == "gd":
        return contraction ** T * delta0
    if base == "sgd":
        L, C1 = params.require(("L", "C1"), theorem)
        return (1.0 - 0.5 * gamma * mu * lmin) ** T * delta0 + gamma * L * C1 / mu * kappa
    if base == "qgd":
        L, omega, M = params.require(("L", "omega", "M"), theorem)
        return (1.0 - 0.5 * gamma * mu * lmin) ** T * delta0 + 2.0 * gamma * L ** 2 / mu * omega / M * kappa
    if base == "mvr":
        b, gap0, sigma2 = params.require(("b", "gap0", "sigma2"), theorem)
        phi0 = delta0 + gamma * lmax / (b * (2.0 - b)) * gap0
        return contraction ** T * phi0 + b * sigma2 / ((2.0 - b) * mu) * kappa
    if base in ("page", "marina"):
        q, gap0 = params.require(("q", "gap0"), theorem)
        return contraction ** T * (delta0 + gamma * lmax / q * gap0)
    beta, gap0_hat = params.require(("beta", "gap0_hat"), theorem)
    return contraction ** T * (delta0 + gamma * lmax / _ef21_root(beta) * gap0_hat)


def iterate_weights(theorem: str, params: TheoryParams, gamma: float, T: int) -> np.ndarray:
    """Sampling distribution of the reported iterate over W^0..W^{T-1}

    SGD-type theorems sample with geometrically decaying weights
    w_t = w_{t-1} / (1 + gamma^2 L A1 lambda_max); every other theorem samples
    uniformly.
    """
    if theorem in ("sgd", "qgd"):
        L, A1, lmax = params.require(("L", "A1", "lmax"), theorem)
        decay = 1.0 + gamma ** 2 * L * A1 * lmax
        w = decay ** -np.arange(1, T + 1, dtype=np.float64)
    else:
        w = np.ones(T)
    return w / w.sum()


def batch_variance(sigma2: float, N: int, B: int) -> float:
    """Variance of a size-B mini-batch mean drawn without replacement from N samples"""
    if N <= 1 or B >= N:
        return 0.0
    return sigma2 * (N - B) / (B * (N - 1))


def derive_constants(problem: Problem, kind: str, weights, W0: np.ndarray, T: int, *,
                     b: Optional[float] = None, q: Optional[float] = None, batch_size: int = 1,
                     clients: Optional[List[Problem]] = None, compressors: Optional[List[Compressor]] = None,
                     gap0: float = 0.0, gap0_hat: float = 0.0,
                     rng: Optional[np.random.Generator] = None) -> TheoryParams:
    """Collect the constants of the theorem covering ``kind`` on ``problem``

    Args:
        problem: Global problem
        kind: Estimator kind (gd, sgd, mvr, page, qgd, marina, ef21, or
            subgradient for the non-smooth method)
        weights: SpectralWeights of the sketch configuration
        W0: Starting point
        T: Number of iterations
        b, q, batch_size: Estimator parameters
        clients, compressors: Federated configuration
        gap0, gap0_hat: Initial estimator gaps
        rng: Unused, derived constants come from enumeration

    Returns:
        TheoryParams with provenance labels; constants that cannot be derived
        are None with a reason in ``missing``
    """
    prov: Dict[str, str] = {}
    missing: Dict[str, str] = {}
    errors: Dict[str, float] = {}
    values: Dict[str, Optional[float]] = {"T": float(T), "lmin": weights.lmin, "lmax": weights.lmax,
                                          "gap0": gap0, "gap0_hat": gap0_hat}
    for name in values:
        prov[name] = "analytic"
    if b is not None:
        values["b"], prov["b"] = b, "analytic"
    if q is not None:
        values["q"], prov["q"] = q, "analytic"
    opt_label = problem.opt_provenance
    if problem.smooth:
        # variance-reduced and federated methods need every component to be L-smooth
        L = problem.smoothness
        if kind in ("mvr", "page"):
            L = max(L, problem.component_smoothness)
        if clients is not None and len(clients) > 1:
            L = max([L] + [c.smoothness for c in clients])
        values["L"], prov["L"] = L, "analytic"
    else:
        values["L0"], prov["L0"] = problem.lipschitz, "analytic"
        values["alpha"], prov["alpha"] = weights.lmin, "analytic"
        if weights.lmin != weights.lmax:
            missing["alpha"] = "expected projection is not a multiple of the identity"
            values["alpha"] = None
    if problem.pl_constant is not None:
        values["mu"], prov["mu"] = problem.pl_constant, "analytic"
    else:
        missing["mu"] = f"{problem.kind} has no certified PL constant"
    if problem.opt_value is not None:
        values["delta0"] = max(0.0, problem.eval(W0) - problem.opt_value)
        prov["delta0"] = opt_label
    else:
        missing["delta0"] = "optimal value unknown"
    if problem.opt_point is not None:
        values["R0"] = math.sqrt(fro_sq(np.asarray(W0) - problem.opt_point))
        prov["R0"] = opt_label
    else:
        missing["R0"] = "minimizer unknown"
    if kind in ("sgd", "mvr", "page") and problem.smooth:
        probes = [W0] + ([problem.opt_point] if problem.opt_point is not None else [])
        sigma2 = max(batch_variance(problem.sample_variance(W), problem.sample_count, batch_size) for W in probes)
        values["sigma2"], prov["sigma2"], errors["sigma2"] = sigma2, "empirical", 0.0
        if kind == "sgd":
            values.update(A1=0.0, B1=1.0, C1=2.0 * sigma2)
            prov.update(A1="empirical", B1="empirical", C1="empirical")
            logger.warning("SGD expected-smoothness constants are empirical fits at W0 and W*")
    if clients is not None:
        values["M"], prov["M"] = float(len(clients)), "analytic"
        try:
            values["delta_star"] = max(0.0, dissimilarity(problem, clients))
            prov["delta_star"] = "empirical" if opt_label == "empirical" or problem.kind == "regularized-linreg" else "analytic"
        except UnsupportedOperationError as exc:
            missing["delta_star"] = str(exc)
    if compressors:
        omegas = [c.omega for c in compressors]
        betas = [c.beta for c in compressors]
        if all(o is not None for o in omegas):
            values["omega"], prov["omega"] = max(omegas), "analytic"
        if all(v is not None for v in betas):
            values["beta"], prov["beta"] = min(betas), "analytic"
    if kind == "qgd" and values.get("omega") is not None and values.get("M") and values.get("L") is not None:
        L, omega, M = values["L"], values["omega"], values["M"]
        values.update(A1=L * omega / M, B1=1.0)
        prov.update(A1="analytic", B1="analytic")
        if values.get("delta_star") is not None:
            values["C1"] = 2.0 * L * omega * values["delta_star"] / M
            prov["C1"] = prov["delta_star"]
    present = {k: v for k, v in values.items() if v is not None}
    return TheoryParams(**present, provenance={k: prov[k] for k in present}, missing=missing, errors=errors)


@dataclass(frozen=True)
class AssumptionReport:
    """Outcome of probing one assumption; ``worst_ratio`` is compared against ``threshold``"""
    name: str
    passed: bool
    worst_ratio: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22} {status}  worst={self.worst_ratio:.6g}  threshold={self.threshold:.6g}  {self.detail}"


ASSUMPTIONS = ("positive-projection", "lower-bounded", "smooth", "expected-smoothness", "bounded-variance",
               "pl", "minimizer", "convex", "lipschitz-continuous", "dissimilarity", "scalar-projection")


def _probe_points(problem: Problem, probes: int, rng: np.random.Generator, scale: float) -> List[np.ndarray]:
    center = problem.opt_point if problem.opt_point is not None else np.zeros(problem.shape)
    return [center + scale * rng.standard_normal(problem.shape) for _ in range(probes)]


def check_assumption(name: str, problem: Problem, params: Optional[TheoryParams] = None, probes: int = 20,
                     rng: Optional[np.random.Generator] = None, *, scale: float = 1.0,
                     sketches: Optional[Tuple[float, Optional[SketchSpec], Optional[SketchSpec]]] = None,
                     clients: Optional[List[Problem]] = None, compressors: Optional[List[Compressor]] = None,
                     batch_size: int = 1, trials: int = 2000, slack: float = 0.1) -> AssumptionReport:
    """Probe a named assumption at random points

    Failures are reported, never raised. ``sketches`` is ``(p, left, right)``
    for the projection assumptions; ``clients`` and ``compressors`` switch the
    expected-smoothness probe to the compressed federated estimator.
    """
    if name not in ASSUMPTIONS:
        raise ConfigurationError(f"unknown assumption '{name}', expected one of {ASSUMPTIONS}", "assumption")
    if probes < 1:
        raise ConfigurationError(f"probes must be at least 1, got {probes}", "probes")
    rng = np.random.default_rng(0) if rng is None else rng
    params = TheoryParams() if params is None else params
    try:
        return _CHECKS[name](problem, params, probes, rng, scale=scale, sketches=sketches, clients=clients,
                             compressors=compressors, batch_size=batch_size, trials=trials, slack=slack)
    except (UnsupportedOperationError, ConfigurationError) as exc:
        return AssumptionReport(name, False, math.nan, math.nan, f"not checkable: {exc}")


def _positive_projection(problem, params, probes, rng, sketches=None, trials=2000, **_):
    if sketches is not None:
        p, left, right = sketches
        weights = spectral_weights(p, left, right, method="monte-carlo", rng=rng, draws=trials)
        lmin = weights.lmin
    else:
        (lmin,) = params.require(("lmin",), "positive-projection")
    return AssumptionReport("positive-projection", lmin > 0.0, lmin, 0.0, "lambda_min^p of E[H] must be positive")


def _lower_bounded(problem, params, probes, rng, scale=1.0, **_):
    if problem.opt_value is None:
        raise UnsupportedOperationError("optimal value unknown")
    f_star = problem.opt_value
    worst = max((f_star - problem.eval(W)) / max(1.0, abs(f_star)) for W in _probe_points(problem, probes, rng, scale))
    return AssumptionReport("lower-bounded", worst <= 1e-10, worst, 1e-10, "max relative (f* - f(W))")


def _smooth(problem, params, probes, rng, scale=1.0, **_):
    L = problem.smoothness if params.L is None else params.L
    if not problem.smooth or L is None:
        raise UnsupportedOperationError(f"{problem.kind} has no smoothness constant")
    worst = 0.0
    for W in _probe_points(problem, probes, rng, scale):
        V = W + scale * rng.standard_normal(problem.shape)
        worst = max(worst, math.sqrt(fro_sq(problem.grad(W) - problem.grad(V)) / fro_sq(W - V)) / L)
    return AssumptionReport("smooth", worst <= 1.0 + 1e-9, worst, 1.0, "max ||grad f(W) - grad f(V)|| / (L ||W - V||)")


def _expected_smoothness(problem, params, probes, rng, scale=1.0, clients=None, compressors=None,
                         batch_size=1, trials=2000, slack=0.1, **_):
    A1, B1, C1 = params.require(("A1", "B1", "C1"), "expected-smoothness")
    if problem.opt_value is None:
        raise UnsupportedOperationError("optimal value unknown")
    worst = 0.0
    for W in _probe_points(problem, probes, rng, scale):
        if clients is not None and compressors is not None:
            grads = [c.grad(W) for c in clients]
            second = np.mean([fro_sq(server_average([Q.compress(g, rng) for Q, g in zip(compressors, grads)]))
                              for _ in range(trials)])
        else:
            second = np.mean([fro_sq(problem.batch_grad(W, problem.draw_indices(batch_size, rng)))
                              for _ in range(trials)])
        bound = 2.0 * A1 * (problem.eval(W) - problem.opt_value) + B1 * fro_sq(problem.grad(W)) + C1
        worst = max(worst, _div(second, bound))
    return AssumptionReport("expected-smoothness", worst <= 1.0 + slack, worst, 1.0 + slack,
                            f"max E||g||^2 / bound over {trials} draws")


def _bounded_variance(problem, params, probes, rng, scale=1.0, **_):
    (sigma2,) = params.require(("sigma2",), "bounded-variance")
    worst = max(_div(problem.sample_variance(W), sigma2) for W in _probe_points(problem, probes, rng, scale))
    return AssumptionReport("bounded-variance", worst <= 1.0 + 1e-9, worst, 1.0, "max sample variance / sigma^2")


def _pl(problem, params, probes, rng, scale=1.0, **_):
    mu = problem.pl_constant if params.mu is None else params.mu
    if mu is None or problem.opt_value is None:
        raise UnsupportedOperationError("PL constant or optimal value unknown")
    worst = math.inf
    for W in _probe_points(problem, probes, rng, scale):
        gap = problem.eval(W) - problem.opt_value
        if gap > 0:
            worst = min(worst, 0.5 * fro_sq(problem.grad(W)) / (mu * gap))
    return AssumptionReport("pl", worst >= 1.0 - 1e-9, worst, 1.0, "min (1/2)||grad f||^2 / (mu (f - f*))")


def _minimizer(problem, params, probes, rng, scale=1.0, **_):
    if problem.opt_point is None or problem.opt_value is None:
        raise UnsupportedOperationError("minimizer unknown")
    f_star = problem.eval(problem.opt_point)
    worst = max((f_star - problem.eval(W)) / max(1.0, abs(f_star)) for W in _probe_points(problem, probes, rng, scale))
    consistent = abs(f_star - problem.opt_value) <= 1e-10 * max(1.0, abs(f_star))
    return AssumptionReport("minimizer", consistent and worst <= 1e-10, worst, 1e-10,
                            "f(W*) = f* and f(W*) <= f(W) at probes")


def _convex(problem, params, probes, rng, scale=1.0, **_):
    worst = -math.inf
    for W in _probe_points(problem, probes, rng, scale):
        V = W + scale * rng.standard_normal(problem.shape)
        avg = 0.5 * (problem.eval(W) + problem.eval(V))
        worst = max(worst, (problem.eval(0.5 * (W + V)) - avg) / max(1.0, abs(avg)))
    return AssumptionReport("convex", worst <= 1e-12, worst, 1e-12, "max midpoint excess f((W+V)/2) - mean")


def _lipschitz_continuous(problem, params, probes, rng, scale=1.0, **_):
    L0 = problem.lipschitz if params.L0 is None else params.L0
    if L0 is None:
        raise UnsupportedOperationError(f"{problem.kind} has no Lipschitz constant")
    worst = max(math.sqrt(fro_sq(problem.first_order(W))) / L0 for W in _probe_points(problem, probes, rng, scale))
    return AssumptionReport("lipschitz-continuous", worst <= 1.0 + 1e-12, worst, 1.0, "max ||subgrad f|| / L0")


def _dissimilarity(problem, params, probes, rng, clients=None, **_):
    if clients is None:
        raise UnsupportedOperationError("no client partition given")
    value = dissimilarity(problem, clients)
    return AssumptionReport("dissimilarity", value >= -1e-10, value, 0.0, "f* - mean client f_l*")


def _scalar_projection(problem, params, probes, rng, sketches=None, trials=2000, **_):
    if sketches is None:
        raise UnsupportedOperationError("no sketch configuration given")
    worst, exact = 0.0, True
    for spec in sketches[1:]:
        if spec is None:
            continue
        if spec.distribution == "coordinate-subset":
            mean, _, _ = enumerate_expected_projection(spec)
        else:
            exact = False
            mean, _, _ = estimate_expected_projection(spec, trials, rng)
        worst = max(worst, float(np.max(np.abs(mean - spec.expected_eigenvalue * np.eye(spec.ambient)))))
    threshold = 1e-12 if exact else 0.02
    return AssumptionReport("scalar-projection", worst <= threshold, worst, threshold,
                            "max |E[H] - (r/d) I|" + (" (enumerated)" if exact else f" ({trials} draws)"))


_CHECKS = {
    "positive-projection": _positive_projection,
    "lower-bounded": _lower_bounded,
    "smooth": _smooth,
    "expected-smoothness": _expected_smoothness,
    "bounded-variance": _bounded_variance,
    "pl": _pl,
    "minimizer": _minimizer,
    "convex": _convex,
    "lipschitz-continuous": _lipschitz_continuous,
    "dissimilarity": _dissimilarity,
    "scalar-projection": _scalar_projection,
}


def format_reports(reports: List[AssumptionReport]) -> str:
    """Human-readable block with one line per assumption"""
    return "\n".join(report.line() for report in reports)
