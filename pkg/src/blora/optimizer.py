#!/usr/bin/env python3
"""The Bernoulli-LoRA driver loop.

Each iteration flips a Bernoulli(p) coin to pick the sketched side, draws one
fresh sketch on that side only, projects the current gradient estimator and
takes the step W' = W - gamma * G_hat. Runs are recorded row by row into a
RunTrace whose columns follow ``common.CSV_HEADER``.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .common import (
    CSV_HEADER, SIDE_CODES, ConfigurationError, DivergenceError, InconsistencyError,
    RngStreams, ShapeError, UnsupportedOperationError, fro_sq,
)
from .compression import Compressor
from .estimators import EstimatorState, advance, estimator_gap, init_estimator
from .federated import FederatedState, advance_federated, client_gap, federated_gap, init_federated
from .logs import setup_logging
from .problems import Problem
from .sketch import SketchSpec, factored_update, project, projection_from_sketch, sample_sketch, spectral_weights
from .theory import (
    TheoryParams, derive_constants, iterate_weights, rate_bound, stepsize_provenance,
    theorem_for, theoretical_stepsize,
)

logger = setup_logging()

STEPSIZE_POLICIES = ("constant", "multiplier", "theorem", "polyak")
SELECTION_RULES = ("uniform", "weighted")
UPDATE_FORMS = ("projected", "factored")


@dataclass(frozen=True)
class StepsizePolicy:
    """How gamma is chosen

    ``constant`` uses ``value`` as gamma, ``multiplier`` uses value / L,
    ``theorem`` evaluates ``theorem`` (chosen from the estimator when None)
    with derived constants overridden by ``params``, and ``polyak`` is the
    adaptive rule of the non-smooth method.
    """
    policy: str = "theorem"
    value: Optional[float] = None
    theorem: Optional[str] = None
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in STEPSIZE_POLICIES:
            raise ConfigurationError(f"unknown policy '{self.policy}', expected one of {STEPSIZE_POLICIES}",
                                     "method.stepsize.policy")
        if self.policy in ("constant", "multiplier"):
            if self.value is None or not math.isfinite(self.value) or self.value <= 0:
                raise ConfigurationError(f"must be a positive number, got {self.value}", "method.stepsize.value")


@dataclass(frozen=True)
class DriverConfig:
    """Parameters of one Bernoulli-LoRA chain"""
    p: float
    T: int
    stepsize: StepsizePolicy
    left: Optional[SketchSpec] = None
    right: Optional[SketchSpec] = None
    estimator: str = "gd"
    estimator_params: Dict[str, Any] = field(default_factory=dict)
    alpha: Optional[float] = None
    rank: Optional[int] = None
    eta: Optional[float] = None
    seed: int = 0
    selection: str = "uniform"
    stop_grad_sq: Optional[float] = None
    pl: bool = False
    update: str = "projected"
    spectral_method: str = "analytic"

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"must lie in [0, 1], got {self.p}", "method.p")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError(f"must be a positive integer, got {self.T}", "method.T")
        if self.p > 0 and self.left is None:
            raise ConfigurationError(f"p={self.p} needs a left sketch", "method.sketch.left")
        if self.p < 1 and self.right is None:
            raise ConfigurationError(f"p={self.p} needs a right sketch", "method.sketch.right")
        if self.selection not in SELECTION_RULES:
            raise ConfigurationError(f"unknown rule '{self.selection}', expected one of {SELECTION_RULES}",
                                     "method.selection")
        if self.update not in UPDATE_FORMS:
            raise ConfigurationError(f"unknown form '{self.update}', expected one of {UPDATE_FORMS}", "method.update")
        if self.stop_grad_sq is not None and self.stop_grad_sq < 0:
            raise ConfigurationError(f"must be non-negative, got {self.stop_grad_sq}", "output.stop_grad_sq")
        scalars = (self.alpha, self.rank, self.eta)
        if any(v is not None for v in scalars) and self.stepsize.policy == "constant":
            if any(v is None for v in scalars):
                raise ConfigurationError("alpha, rank and eta must be given together", "method.alpha")
            expected = self.alpha * self.eta / self.rank
            gamma = self.stepsize.value
            if abs(gamma - expected) > 1e-12 * max(1.0, abs(gamma)):
                raise ConfigurationError(f"gamma={gamma} differs from alpha*eta/r={expected}", "method.stepsize.value")


@dataclass
class FederatedSetup:
    """Clients and compressors of a simulated multi-client run"""
    clients: List[Problem]
    compressors: List[Compressor]
    q: Optional[float] = None


class TraceRow(NamedTuple):
    iter: int
    f: float
    grad_sq_norm: float
    estimator_gap: float
    lyapunov: float
    stepsize: float
    comm_scalars: float
    side: str


@dataclass
class RunTrace:
    """Per-iteration rows of a chain together with its summary"""
    rows: List[TraceRow] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    gamma: Optional[float] = None
    provenance: str = "analytic"
    theorem: Optional[str] = None
    params: Optional[TheoryParams] = None
    W_final: Optional[np.ndarray] = None
    W_average: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        """One CSV column as an array (the side column stays a list of strings)"""
        if name not in CSV_HEADER:
            raise KeyError(name)
        values = [getattr(row, name) for row in self.rows]
        return values if name == "side" else np.asarray(values, dtype=np.float64)


def bernoulli_step(W: np.ndarray, G: np.ndarray, p: float, left_spec: Optional[SketchSpec],
                   right_spec: Optional[SketchSpec], gamma: float, streams: RngStreams,
                   update: str = "projected", alpha: Optional[float] = None,
                   eta: Optional[float] = None) -> Tuple[np.ndarray, str, np.ndarray]:
    """One Bernoulli-LoRA step W' = W - gamma * G_hat

    G_hat = H_B G with probability p and G H_A otherwise. The coin comes from
    the bernoulli stream and the sketch from the chosen side's own stream.
    With ``update="factored"`` the step trains the LoRA factor directly with
    scaling ``alpha`` and factor stepsize ``eta``.

    Returns:
        Tuple of (new W, "left" or "right", projection used)
    """
    W = np.asarray(W, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if W.shape != G.shape:
        raise ShapeError(f"W {W.shape} and G {G.shape} differ")
    if not gamma > 0 or not math.isfinite(gamma):
        raise ConfigurationError(f"must be a positive number, got {gamma}", "gamma")
    side = "left" if streams.bernoulli.random() < p else "right"
    spec = left_spec if side == "left" else right_spec
    if spec is None:
        raise ConfigurationError(f"a {side} step needs a {side} sketch", f"sketch.{side}")
    if tuple(spec.dims) != W.shape:
        raise ShapeError(f"{side} sketch for {spec.dims} applied to W {W.shape}")
    S = sample_sketch(spec, streams.sketch(side))
    H = projection_from_sketch(S, side)
    if update == "factored":
        if alpha is None or eta is None:
            alpha, eta = float(spec.rank), gamma
        W_new, _ = factored_update(W, G, S, side, gamma=gamma, alpha=alpha, rank=spec.rank, eta=eta)
    else:
        W_new = W - gamma * project(G, H, side)
    return W_new, side, H


def polyak_stepsize(f_W: float, f_star: float, subgrad_sq_norm: float) -> float:
    """gamma_t = (f(W) - f*) / ||subgrad f(W)||^2, zero once the gap closes

    Raises:
        InconsistencyError: Positive gap with a zero subgradient
    """
    gap = f_W - f_star
    if gap < 0:
        if gap < -1e-12 * max(1.0, abs(f_star)):
            raise InconsistencyError(f"f(W)={f_W} lies below f*={f_star}")
        gap = 0.0
    if gap == 0.0:
        return 0.0
    if subgrad_sq_norm == 0.0:
        raise InconsistencyError(f"zero subgradient at a point with gap {gap}")
    return gap / subgrad_sq_norm


def lyapunov_coefficient(kind: str, gamma: float, lmax: float, pl: bool = False, b: Optional[float] = None,
                         q: Optional[float] = None, beta: Optional[float] = None) -> float:
    """Weight c of the estimator gap in Phi = f - f* + c * gap

    GD, SGD and QGD track f - f* only. The non-convex forms carry a factor 1/2
    that the PL forms drop.
    """
    scale = 1.0 if pl else 0.5
    if kind in ("page", "marina"):
        return scale * gamma * lmax / q
    if kind == "mvr":
        return scale * gamma * lmax / (b * (2.0 - b))
    if kind == "ef21":
        return scale * gamma * lmax / (1.0 - math.sqrt(1.0 - beta))
    return 0.0


def lyapunov(f_value: float, f_star: Optional[float], gap: float, coefficient: float) -> float:
    """Phi = f - f* + c * gap, NaN when f* is unknown"""
    if f_star is None:
        return math.nan
    return f_value - f_star + coefficient * gap


def _resolve_stepsize(config: DriverConfig, problem: Problem, kind: str,
                      params: TheoryParams) -> Tuple[Optional[float], str, Optional[str]]:
    policy = config.stepsize
    if policy.policy == "polyak":
        if problem.smooth:
            raise ConfigurationError("the Polyak stepsize applies to non-smooth problems", "method.stepsize.policy")
        if problem.opt_value is None:
            raise ConfigurationError("the Polyak stepsize needs a known f*", "method.stepsize.policy")
        return None, "analytic", "nonsmooth-polyak"
    default_theorem = "nonsmooth-constant" if not problem.smooth else theorem_for(kind, config.pl)
    theorem = policy.theorem or default_theorem
    if policy.policy == "constant":
        return float(policy.value), "analytic", theorem
    if policy.policy == "multiplier":
        if not problem.smoothness:
            raise ConfigurationError("the multiplier policy needs a smoothness constant", "method.stepsize.policy")
        return float(policy.value) / problem.smoothness, "analytic", theorem
    gamma = theoretical_stepsize(theorem, params)
    if not math.isfinite(gamma) or gamma <= 0:
        raise ConfigurationError(f"theorem '{theorem}' gives an unusable stepsize {gamma}", "method.stepsize")
    return gamma, stepsize_provenance(theorem, params), theorem


def _observed(theorem: Optional[str], trace: RunTrace, f_star: Optional[float], weights: np.ndarray,
              f_average: Optional[float]) -> float:
    """Quantity the theorem bounds, measured on this run"""
    if theorem is None or not trace.rows:
        return math.nan
    if theorem.startswith("nonsmooth"):
        return math.nan if f_star is None or f_average is None else f_average - f_star
    if theorem.endswith("-pl"):
        return math.nan if f_star is None else trace.rows[-1].f - f_star
    gsq = trace.column("grad_sq_norm")
    return float(np.dot(weights[:len(gsq)] / weights[:len(gsq)].sum(), gsq))


def run_chain(config: DriverConfig, problem: Problem, W0: Optional[np.ndarray] = None,
              federated: Optional[FederatedSetup] = None) -> RunTrace:
    """Run T Bernoulli-LoRA iterations from W0 and record the trace

    Row t describes W^t: its value, squared gradient norm, the estimator gap
    and Lyapunov value, followed by the stepsize and side of step t and the
    scalars communicated so far. Smooth problems use the configured estimator
    (or the federated one when ``federated`` is given); non-smooth problems use
    the subgradient and additionally record the averaged iterate.

    Raises:
        DivergenceError: f or the estimator became NaN or Inf; carries the
            row index and the partial trace
        InconsistencyError: The Polyak stepsize met f(W) < f* or a zero
            subgradient with a positive gap; carries the same attachments
    """
    started = time.perf_counter()
    streams = RngStreams(config.seed)
    W = problem.check(np.zeros(problem.shape) if W0 is None else W0).copy()
    f_star = problem.opt_value
    state: Union[EstimatorState, FederatedState, None] = None
    kind = "subgradient"
    if problem.smooth:
        if federated is not None:
            kind = config.estimator
            state = init_federated(kind, federated.clients, W, federated.compressors,
                                   streams.client_streams(len(federated.clients)), q=federated.q)
        else:
            kind = config.estimator
            state = init_estimator(kind, config.estimator_params, problem, W)
    elif config.estimator not in ("subgradient", "gd"):
        raise ConfigurationError(f"non-smooth problems use the subgradient, got '{config.estimator}'",
                                 "method.estimator")

    weights = spectral_weights(config.p, config.left, config.right, method=config.spectral_method,
                               rng=np.random.default_rng(config.seed))
    params = derive_constants(
        problem, kind, weights, W, config.T,
        b=getattr(state, "b", None), q=getattr(state, "q", None),
        batch_size=getattr(state, "batch_size", 1),
        clients=federated.clients if federated is not None else None,
        compressors=federated.compressors if federated is not None else None,
        gap0=getattr(state, "initial_gap", 0.0), gap0_hat=getattr(state, "initial_client_gap", 0.0))
    if config.stepsize.params:
        overrides = TheoryParams.from_mapping(config.stepsize.params).as_dict()
        params = params.updated(**{k: v for k, v in overrides.items() if v is not None})
    gamma, provenance, theorem = _resolve_stepsize(config, problem, kind, params)
    trace = RunTrace(gamma=gamma, provenance=provenance, theorem=theorem, params=params)
    if gamma is not None:
        coefficient = lyapunov_coefficient(kind, gamma, weights.lmax, config.pl or (theorem or "").endswith("-pl"),
                                           b=getattr(state, "b", None), q=getattr(state, "q", None),
                                           beta=state.beta if isinstance(state, FederatedState) else None)
    else:
        coefficient = 0.0
    if f_star is None:
        logger.warning(f"f* unknown for {problem.kind}, Lyapunov tracking disabled")
    logger.info(f"Running {kind} on {problem.kind} {problem.shape}: p={config.p}, T={config.T}, "
                f"gamma={'polyak' if gamma is None else f'{gamma:.6g}'} ({provenance}), seed={config.seed}")

    W_sum = np.zeros(problem.shape)
    stopped_at = None
    halted = False
    for t in range(config.T):
        f_value = problem.eval(W)
        g = problem.first_order(W)
        gsq = fro_sq(g)
        if problem.smooth:
            G = state.G
            gap = federated_gap(state, problem, W) if federated is not None else estimator_gap(state, problem, W)
            lyap_gap = client_gap(state, W) if kind == "ef21" and federated is not None else gap
        else:
            G, gap, lyap_gap = g, 0.0, 0.0
        if not (math.isfinite(f_value) and math.isfinite(gsq) and math.isfinite(gap) and np.all(np.isfinite(G))):
            raise DivergenceError(t, trace, "objective or estimator")
        comm = float(state.comm) if state is not None else 0.0
        phi = lyapunov(f_value, f_star, lyap_gap, coefficient)
        W_sum += W
        try:
            step = gamma if gamma is not None else polyak_stepsize(f_value, f_star, gsq)
        except InconsistencyError as e:
            e.row, e.trace = t, trace
            raise
        if step == 0.0 or (config.stop_grad_sq is not None and gsq <= config.stop_grad_sq):
            trace.rows.append(TraceRow(t, f_value, gsq, gap, phi, step, comm, ""))
            halted = step == 0.0
            stopped_at = t
            # the halted iterate is a fixed point of the remaining steps
            W_sum += (config.T - t - 1) * W
            break
        W_new, side, _ = bernoulli_step(W, G, config.p, config.left, config.right, step, streams,
                                        update=config.update, alpha=config.alpha, eta=config.eta)
        trace.rows.append(TraceRow(t, f_value, gsq, gap, phi, step, comm, SIDE_CODES[side]))
        logger.debug(f"t={t} f={f_value:.6e} gsq={gsq:.3e} side={side}")
        if not np.all(np.isfinite(W_new)):
            raise DivergenceError(t + 1, trace, "iterate")
        if t < config.T - 1 and state is not None:
            if federated is not None:
                advance_federated(state, W_new, W, streams.data)
            else:
                advance(state, W_new, W, problem, streams.data)
        W = W_new

    trace.W_final = W
    f_average = None
    if not problem.smooth:
        trace.W_average = W_sum / config.T
        f_average = problem.eval(trace.W_average)
    try:
        reporting = (iterate_weights(theorem, params, gamma, config.T)
                     if config.selection == "weighted" and gamma is not None else np.ones(config.T) / config.T)
    except ConfigurationError as exc:
        logger.warning(f"Weighted selection unavailable ({exc}), using uniform weights")
        reporting = np.ones(config.T) / config.T
    try:
        bound = rate_bound(theorem, params, gamma) if theorem is not None else math.nan
    except (ConfigurationError, UnsupportedOperationError) as exc:
        logger.debug(f"No rate bound for {theorem}: {exc}")
        bound = math.nan
    gsq_column = trace.column("grad_sq_norm")
    trace.summary = {
        "delta0": math.nan if f_star is None else trace.rows[0].f - f_star,
        "min_grad_sq": float(gsq_column.min()),
        "avg_grad_sq": float(gsq_column.mean()),
        "weighted_grad_sq": float(np.dot(reporting[:len(gsq_column)] / reporting[:len(gsq_column)].sum(),
                                         gsq_column)),
        "final_f": trace.rows[-1].f,
        "average_f": f_average,
        "left_steps": sum(row.side == "L" for row in trace.rows),
        "comm_scalars": trace.rows[-1].comm_scalars,
        "stopped_at": stopped_at,
        "halted": halted,
        "bound": bound,
        "observed": _observed(theorem, trace, f_star, reporting, f_average),
        "wall_time": time.perf_counter() - started,
    }
    logger.info(f"Finished after {len(trace)} rows: f={trace.summary['final_f']:.6e}, "
                f"min ||grad||^2={trace.summary['min_grad_sq']:.3e}")
    return trace
