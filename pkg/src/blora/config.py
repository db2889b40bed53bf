#!/usr/bin/env python3

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import yaml
from omegaconf import OmegaConf

from .common import OUTPUT_ROOT_ENV, ConfigurationError
from .compression import make_compressor
from .estimators import ESTIMATOR_KINDS
from .federated import FEDERATED_KINDS
from .logs import setup_logging
from .optimizer import SELECTION_RULES, UPDATE_FORMS, DriverConfig, FederatedSetup, StepsizePolicy
from .problems import (
    PARTITION_STRATEGIES, PROBLEM_KINDS, Problem, coerce_config,
    linreg_from_data, load_dataset, make_initial_point, make_problem,
)
from .sketch import SKETCH_DISTRIBUTIONS, SketchSpec

logger = setup_logging()

# Default configuration schema
DEFAULT_CONFIG = {
    "problem": {
        "kind": "regularized-linreg",   # regularized-linreg, quadratic-pl or nonsmooth-l1
        "data": None,                   # Dataset file from problems.save_dataset, replaces the linreg generator
        "init": "zeros",                # zeros, gaussian, shifted-optimum or pretrain
        "init_scale": 1.0,              # Scale of random initializations
        "init_seed": 0,                 # Seed of random initializations
        "regularized-linreg": {         # Fine-tuning task, biased column scaling
            "samples": 500,
            "features": 64,
            "reg_weight": "auto",       # auto sets lambda to the spectral norm of D
            "noise": 50.0,
            "bias": 10.0,
            "tail_strength": 0.9,
            "effective_rank": 32,
            "informative": 0.5,
            "seed": 84,
            "column_mean": 1.0,
            "column_std": 2.0,
            "shape": None,              # Parameter matrix shape, as square as possible when null
            "sample_count": None,       # Number of finite-sum samples, one per data row when null
        },
        "quadratic-pl": {
            "shape": [2, 4],
            "rows": None,               # Rows of C, m*n when null
            "mu": 0.2,
            "L": 1.0,
            "residual": 0.0,            # Norm of the target part outside range(C)
            "seed": 0,
            "sample_count": None,
        },
        "nonsmooth-l1": {
            "shape": [2, 4],
            "rows": 40,
            "seed": 0,
            "planted_scale": 1.0,
        },
        "pretrain": {                   # Pre-training task used by init: pretrain, standard scaling
            "samples": 900,
            "features": 64,
            "reg_weight": "auto",
            "noise": 20.0,
            "bias": 0.0,
            "tail_strength": 0.8,
            "effective_rank": 64,
            "informative": 1.0,
            "seed": 42,
            "column_mean": 0.0,
            "column_std": 1.0,
            "shape": None,
        },
        "pretrain_tol": 1e-8,           # Pre-training stops once ||grad||^2 falls below this
        "pretrain_max_iter": 100000,
    },
    "method": {
        "name": None,                   # Label of the method in outputs, derived when null
        "estimator": "gd",              # gd, sgd, mvr, page (single node); gd, qgd, marina, ef21 (clients);
                                        # subgradient for non-smooth problems
        "p": 0.5,                       # Probability of a left (B-side) step
        "T": 1000,                      # Chain length
        "batch_size": 1,
        "b": None,                      # MVR momentum parameter
        "q": None,                      # PAGE/MARINA synchronization probability
        "sketch": {
            "left": {"distribution": "gaussian", "rank": 1},
            "right": {"distribution": "gaussian", "rank": 1},
        },
        "stepsize": {
            "policy": "theorem",        # constant, multiplier (gamma = c/L), theorem or polyak
            "value": None,              # gamma for constant, c for multiplier
            "theorem": None,            # Theorem name, chosen from the estimator when null
            "params": {},               # Overrides of derived theory constants
        },
        "pl": False,                    # Use the PL forms of stepsize and Lyapunov function
        "selection": "uniform",         # Reported iterate distribution: uniform or weighted
        "update": "projected",          # projected (W - gamma H G) or factored (train the LoRA factor)
        "spectral_method": "analytic",  # analytic or monte-carlo spectral weights
        "alpha": None,                  # LoRA scaling, checked against gamma = alpha*eta/r
        "eta": None,                    # LoRA factor stepsize
        "clients": None,                # Number of clients, federated run when set
        "split": "random",              # random or sorted client partition
        "compressor": {
            "kind": None,               # identity, rand-k, top-k or stochastic-dither, by estimator when null
            "k": None,                  # Kept coordinates, d/4 when null
            "levels": 4,
            "scaled": False,            # Divide an unbiased operator by omega+1 to make it contractive
        },
    },
    "comparison": [],                   # Partial method sections merged over method, one curve each
    "seeds": [0],
    "output": {
        "directory": None,              # Falls back to $BLORA_OUTPUT_ROOT/<config name>, then runs/<config name>
        "stop_grad_sq": None,           # Stop a run once ||grad f||^2 falls below this
        "jobs": 1,                      # Seeds run concurrently in that many processes
    },
    "logging": {
        "level": "INFO",                # Logging level (DEBUG, INFO, WARNING, ERROR)
        "colored": True,                # Whether to use colored logging
        "file": None,                   # Log file path (None = console only)
    },
}

DEFAULT_COMPRESSOR = {"gd": "identity", "qgd": "rand-k", "marina": "rand-k", "ef21": "top-k"}


def coerce_override(value: Any) -> Any:
    """Turn a +key=value string into bool, int, float, list or JSON where it looks like one"""
    if not isinstance(value, str):
        return value
    if (value.startswith('[') and value.endswith(']')) or (value.startswith('{') and value.endswith('}')):
        try:
            return json.loads(value.replace("'", "\""))
        except json.JSONDecodeError:
            return value
    lowered = value.lower()
    if lowered == 'true':
        return True
    if lowered == 'false':
        return False
    if lowered in ('null', 'none'):
        return None
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    if ',' in value and not (value.startswith('/') or value.startswith('./')):
        return [coerce_override(item.strip()) for item in value.split(',')]
    return value


def _apply_overrides(config, overrides: Optional[Dict[str, Any]]):
    for key, value in (overrides or {}).items():
        try:
            OmegaConf.update(config, key, coerce_override(value), force_add=True)
        except Exception as e:
            raise ConfigurationError(f"cannot apply override: {e}", key)
    return config


class Config:
    """Configuration handler for bLoRA experiments through OmegaConf"""

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        """Load a YAML file over the defaults, then apply dot-path overrides

        Raises:
            FileNotFoundError: The file does not exist
            yaml.YAMLError: The file is not valid YAML
        """
        self.path = config_path
        self.config = OmegaConf.create(DEFAULT_CONFIG)
        if config_path:
            if not os.path.exists(config_path):
                raise FileNotFoundError(f"Configuration file not found: {config_path}")
            user_config = OmegaConf.load(config_path)
            self.config = OmegaConf.merge(self.config, user_config)
            logger.info(f"Loaded configuration from {config_path}")
        _apply_overrides(self.config, overrides)
        verbose = str(self.config.logging.level).upper() == "DEBUG" or logger.isEnabledFor(logging.DEBUG)
        setup_logging(verbose=verbose, log_file=self.config.logging.file,
                      colored=bool(self.config.logging.colored))

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value by dot-separated key path, or default if absent"""
        value = OmegaConf.select(self.config, key, default=default)
        return default if value is None else value

    def to_container(self) -> Dict[str, Any]:
        return OmegaConf.to_container(self.config, resolve=True)

    def save(self, path: str) -> bool:
        """Save current configuration to a YAML file

        Returns:
            True if successful, False otherwise
        """
        try:
            with open(path, 'w') as f:
                yaml.dump(self.to_container(), f, default_flow_style=False)
            logger.info(f"Saved configuration to {path}")
            return True
        except OSError as e:
            logger.error(f"Error saving configuration: {e}")
            return False

    @staticmethod
    def generate_default_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> bool:
        """Write the default configuration, merged with an existing file and overrides

        Args:
            path: Path to save default configuration
            overrides: Dot-notation paths to override (e.g. {'method.p': '0.2'})

        Returns:
            True if successful, False otherwise
        """
        config = OmegaConf.create(DEFAULT_CONFIG)
        existing_config = None
        if os.path.exists(path):
            try:
                existing_config = OmegaConf.load(path)
                logger.info(f"Found existing configuration at {path}, merging with defaults")
                config = OmegaConf.merge(config, existing_config)
            except yaml.YAMLError as e:
                logger.warning(f"Failed to load existing configuration at {path}: {e}. Using defaults.")
        for key, value in (overrides or {}).items():
            try:
                OmegaConf.update(config, key, coerce_override(value), force_add=True)
            except Exception as e:
                logger.warning(f"Failed to override {key} = {value}: {e}")
        try:
            with open(path, 'w') as f:
                yaml.dump(OmegaConf.to_container(config), f, default_flow_style=False)
        except OSError as e:
            logger.error(f"Error generating configuration: {e}")
            return False
        if existing_config and overrides:
            logger.info(f"Updated configuration at {path} (merged with existing, applied {len(overrides)} overrides)")
        elif existing_config:
            logger.info(f"Updated configuration at {path} (merged with existing)")
        elif overrides:
            logger.info(f"Generated configuration at {path} with {len(overrides)} overrides")
        else:
            logger.info(f"Generated default configuration at {path}")
        return True


def _relabel(exc: ConfigurationError, prefix: str, old: str = "") -> ConfigurationError:
    """Re-root the field of an error under ``prefix``"""
    name = exc.field or ""
    if old and name.startswith(old):
        name = name[len(old):].lstrip(".")
    return ConfigurationError(exc.message, f"{prefix}.{name}" if name else prefix)


def _linreg_params(params: Dict[str, Any]) -> Dict[str, Any]:
    params = dict(params)
    if params.get("reg_weight") == "auto":
        params["reg_weight"] = None
    return params


@dataclass(frozen=True)
class ProblemSpec:
    """Problem section: kind, generator parameters and initialization"""
    kind: str
    params: Dict[str, Any]
    data: Optional[str] = None
    init: str = "zeros"
    init_scale: float = 1.0
    init_seed: int = 0
    pretrain: Optional[Dict[str, Any]] = None
    pretrain_tol: float = 1e-8
    pretrain_max_iter: int = 100000

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ConfigurationError(f"unknown kind '{self.kind}', expected one of {PROBLEM_KINDS}", "problem.kind")
        if self.data is not None and self.kind != "regularized-linreg":
            raise ConfigurationError("dataset files feed the regularized-linreg problem only", "problem.data")
        params = self._generator_params()
        if self.kind == "regularized-linreg":
            params["solve_optimum"] = False
        try:
            coerce_config(self.kind, params)
        except ConfigurationError as exc:
            raise _relabel(exc, f"problem.{self.kind}", "problem")
        if self.init == "pretrain":
            try:
                coerce_config("regularized-linreg", {**_linreg_params(self.pretrain or {}), "solve_optimum": False})
            except ConfigurationError as exc:
                raise _relabel(exc, "problem.pretrain", "problem")

    def _generator_params(self) -> Dict[str, Any]:
        params = dict(self.params)
        if self.kind == "regularized-linreg":
            params = _linreg_params(params)
            params["solve_optimum"] = params.get("solve_optimum", True)
        return params

    def build(self) -> Problem:
        """Construct the problem, from the dataset file when one is configured"""
        try:
            if self.data is not None:
                D, b, seed = load_dataset(self.data)
                cfg = coerce_config(self.kind, {**self._generator_params(), "features": D.shape[1],
                                                "samples": D.shape[0], "seed": seed})
                return linreg_from_data(D, b, cfg)
            return make_problem(self.kind, self._generator_params())
        except ConfigurationError as exc:
            raise _relabel(exc, f"problem.{self.kind}", "problem")

    def initial_point(self, problem: Problem) -> np.ndarray:
        pretrain = None
        if self.init == "pretrain":
            pretrain = coerce_config("regularized-linreg", {**_linreg_params(self.pretrain or {}),
                                                            "shape": list(problem.shape), "solve_optimum": False})
        return make_initial_point(problem, self.init, seed=self.init_seed, scale=self.init_scale,
                                  pretrain=pretrain, pretrain_tol=self.pretrain_tol,
                                  pretrain_max_iter=self.pretrain_max_iter)


@dataclass(frozen=True)
class MethodSpec:
    """One method section, after merging a comparison entry over the base method"""
    name: str
    estimator: str = "gd"
    p: float = 0.5
    T: int = 1000
    batch_size: int = 1
    b: Optional[float] = None
    q: Optional[float] = None
    left: Dict[str, Any] = field(default_factory=dict)
    right: Dict[str, Any] = field(default_factory=dict)
    stepsize: StepsizePolicy = field(default_factory=StepsizePolicy)
    pl: bool = False
    selection: str = "uniform"
    update: str = "projected"
    spectral_method: str = "analytic"
    alpha: Optional[float] = None
    eta: Optional[float] = None
    clients: Optional[int] = None
    split: str = "random"
    compressor: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        kinds = FEDERATED_KINDS if self.federated else ESTIMATOR_KINDS + ("subgradient",)
        if self.estimator not in kinds:
            raise ConfigurationError(f"unknown estimator '{self.estimator}', expected one of {kinds}",
                                     "method.estimator")
        if not isinstance(self.p, (int, float)) or not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"must lie in [0, 1], got {self.p}", "method.p")
        if not isinstance(self.T, int) or self.T < 1:
            raise ConfigurationError(f"must be a positive integer, got {self.T}", "method.T")
        if self.clients is not None and (not isinstance(self.clients, int) or self.clients < 1):
            raise ConfigurationError(f"must be a positive integer, got {self.clients}", "method.clients")
        if self.split not in PARTITION_STRATEGIES:
            raise ConfigurationError(f"unknown split '{self.split}', expected one of {PARTITION_STRATEGIES}",
                                     "method.split")
        if self.selection not in SELECTION_RULES:
            raise ConfigurationError(f"unknown rule '{self.selection}'", "method.selection")
        if self.update not in UPDATE_FORMS:
            raise ConfigurationError(f"unknown form '{self.update}'", "method.update")
        for side, section in (("left", self.left), ("right", self.right)):
            if section.get("distribution") not in SKETCH_DISTRIBUTIONS:
                raise ConfigurationError(f"unknown distribution '{section.get('distribution')}'",
                                         f"method.sketch.{side}.distribution")

    @property
    def federated(self) -> bool:
        return self.clients is not None

    def sketch_specs(self, shape: Tuple[int, int]) -> Tuple[Optional[SketchSpec], Optional[SketchSpec]]:
        """Sketch specs of the sides this method can sample"""
        specs = []
        for side, section, used in (("left", self.left, self.p > 0), ("right", self.right, self.p < 1)):
            if not used:
                specs.append(None)
                continue
            try:
                specs.append(SketchSpec(side, section["distribution"], section.get("rank", 1), shape))
            except ConfigurationError as exc:
                raise _relabel(exc, f"method.sketch.{side}", "sketch")
        return specs[0], specs[1]

    def driver_config(self, shape: Tuple[int, int], seed: int, stop_grad_sq: Optional[float] = None) -> DriverConfig:
        left, right = self.sketch_specs(shape)
        rank = None
        if self.alpha is not None or self.eta is not None:
            rank = (left or right).rank
        estimator_params = {"batch_size": self.batch_size, "b": self.b, "q": self.q}
        return DriverConfig(p=float(self.p), T=self.T, stepsize=self.stepsize, left=left, right=right,
                            estimator=self.estimator, estimator_params=estimator_params,
                            alpha=self.alpha, rank=rank, eta=self.eta, seed=seed, selection=self.selection,
                            stop_grad_sq=stop_grad_sq, pl=self.pl, update=self.update,
                            spectral_method=self.spectral_method)

    def federated_setup(self, problem: Problem, seed: int) -> Optional[FederatedSetup]:
        """Client partition and compressors; the random split is seeded by the run seed"""
        if not self.federated:
            return None
        clients = problem.partition(self.clients, seed, self.split)
        kind = self.compressor.get("kind") or DEFAULT_COMPRESSOR[self.estimator]
        k = self.compressor.get("k") or max(1, problem.dim // 4)
        compressors = [make_compressor(kind, problem.dim, k=k, levels=self.compressor.get("levels"),
                                       scaled=bool(self.compressor.get("scaled", False)))
                       for _ in clients]
        return FederatedSetup(clients, compressors, q=self.q)


def _method_name(section: Dict[str, Any]) -> str:
    name = f"{section['estimator']}-p{section['p']}"
    if section.get("clients"):
        name += f"-M{section['clients']}"
    return name


def _method_spec(section: Dict[str, Any], where: str) -> MethodSpec:
    section = dict(section)
    try:
        stepsize = StepsizePolicy(**dict(section.pop("stepsize") or {}))
        sketch = dict(section.pop("sketch") or {})
        known = {f for f in MethodSpec.__dataclass_fields__}
        unknown = sorted(set(section) - known)
        if unknown:
            raise ConfigurationError(f"unknown keys {unknown}", "method")
        name = section.pop("name", None) or _method_name(section)
        return MethodSpec(name=name, stepsize=stepsize, left=dict(sketch.get("left") or {}),
                          right=dict(sketch.get("right") or {}), **section)
    except ConfigurationError as exc:
        raise _relabel(exc, where, "method")
    except TypeError as exc:
        raise ConfigurationError(str(exc), f"{where}.stepsize")


def parse_seeds(value: Any) -> Tuple[int, ...]:
    """Seeds from a list, a comma-separated string, or a ``first:last`` inclusive range"""
    if isinstance(value, str):
        value = value.strip()
        if ":" in value:
            first, last = value.split(":", 1)
            value = list(range(int(first), int(last) + 1))
        else:
            value = [item for item in value.split(",") if item.strip()]
    if isinstance(value, int):
        value = [value]
    try:
        seeds = tuple(int(s) for s in (value or []))
    except (TypeError, ValueError):
        raise ConfigurationError(f"seeds must be integers, got {value!r}", "seeds")
    if not seeds:
        raise ConfigurationError("at least one seed is required", "seeds")
    if any(s < 0 or s >= 2 ** 64 for s in seeds):
        raise ConfigurationError("seeds must lie in [0, 2^64)", "seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError("seeds must be distinct", "seeds")
    return seeds


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment: one problem, one or more methods, a seed list and outputs"""
    problem: ProblemSpec
    methods: Tuple[MethodSpec, ...]
    seeds: Tuple[int, ...]
    output_directory: str
    stop_grad_sq: Optional[float] = None
    jobs: int = 1
    source: Optional[str] = None
    raw: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)


def default_output_directory(config_path: Optional[str]) -> str:
    stem = Path(config_path).stem if config_path else "experiment"
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return str(Path(root) / stem) if root else str(Path("runs") / stem)


def load_experiment(path: Optional[str], overrides: Optional[Dict[str, Any]] = None, seeds: Any = None,
                    out: Optional[str] = None, stop_grad_sq: Optional[float] = None,
                    jobs: Optional[int] = None) -> ExperimentConfig:
    """Load and validate an experiment configuration

    Command-line values (``seeds``, ``out``, ``stop_grad_sq``, ``jobs``) take
    precedence over the file.

    Raises:
        ConfigurationError: Any invalid value, with the dotted field name
    """
    raw = Config(path, overrides).to_container()
    problem_section = raw["problem"]
    kind = problem_section["kind"]
    if kind not in PROBLEM_KINDS:
        raise ConfigurationError(f"unknown kind '{kind}', expected one of {PROBLEM_KINDS}", "problem.kind")
    problem = ProblemSpec(kind=kind, params=dict(problem_section.get(kind) or {}),
                          data=problem_section.get("data"), init=problem_section["init"],
                          init_scale=float(problem_section["init_scale"]), init_seed=int(problem_section["init_seed"]),
                          pretrain=problem_section.get("pretrain"),
                          pretrain_tol=float(problem_section["pretrain_tol"]),
                          pretrain_max_iter=int(problem_section["pretrain_max_iter"]))
    base = raw["method"]
    if kind == "nonsmooth-l1" and base["estimator"] == "gd":
        base = {**base, "estimator": "subgradient"}
    methods = [_method_spec(base, "method")] if not raw["comparison"] else []
    for i, entry in enumerate(raw["comparison"] or []):
        merged = OmegaConf.to_container(OmegaConf.merge(OmegaConf.create(base), OmegaConf.create(entry or {})))
        methods.append(_method_spec(merged, f"comparison[{i}]"))
    names = [m.name for m in methods]
    for i, name in enumerate(names):
        if names.index(name) != i:
            raise ConfigurationError(f"duplicate method name '{name}'", f"comparison[{i}].name")
    output = raw["output"]
    threshold = stop_grad_sq if stop_grad_sq is not None else output.get("stop_grad_sq")
    if threshold is not None and float(threshold) < 0:
        raise ConfigurationError(f"must be non-negative, got {threshold}", "output.stop_grad_sq")
    jobs = int(jobs if jobs is not None else output.get("jobs", 1))
    if jobs < 1:
        raise ConfigurationError(f"must be a positive integer, got {jobs}", "output.jobs")
    directory = out or output.get("directory") or default_output_directory(path)
    return ExperimentConfig(problem=problem, methods=tuple(methods),
                            seeds=parse_seeds(seeds if seeds is not None else raw["seeds"]),
                            output_directory=str(directory),
                            stop_grad_sq=None if threshold is None else float(threshold),
                            jobs=jobs, source=path, raw=raw)
