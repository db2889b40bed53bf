#!/usr/bin/env python3

import argparse
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .common import BLoRAError, ConfigurationError, DivergenceError, InconsistencyError, InputError
from .config import Config, ExperimentConfig, MethodSpec, load_experiment
from .logs import setup_logging
from .optimizer import RunTrace, run_chain
from .problems import Problem
from .report import read_trace_csv, render_text, write_aggregate_csv, write_meta, write_summary, write_trace_csv
from .sketch import spectral_weights
from .theory import (
    ASSUMPTIONS, TheoryParams, check_assumption, derive_constants, format_reports, rate_bound,
    theoretical_stepsize,
)
from .version import get_version

logger = setup_logging()


@dataclass
class SeedResult:
    seed: int
    trace: RunTrace
    diverged: bool = False
    failed: bool = False
    message: str = ""


def run_seed(problem: Problem, W0: np.ndarray, method: MethodSpec, seed: int,
             stop_grad_sq: Optional[float] = None) -> SeedResult:
    """One chain of one method; divergence or an inconsistent Polyak step keeps the partial trace"""
    config = method.driver_config(problem.shape, seed, stop_grad_sq)
    try:
        trace = run_chain(config, problem, W0, method.federated_setup(problem, seed))
        return SeedResult(seed, trace)
    except (DivergenceError, InconsistencyError) as e:
        logger.warning(f"{method.name} seed {seed}: {e}")
        trace = e.trace if e.trace is not None else RunTrace()
        diverged = isinstance(e, DivergenceError)
        return SeedResult(seed, trace, diverged=diverged, failed=not diverged, message=str(e))


def _run_seed_job(args: Tuple[Problem, np.ndarray, MethodSpec, int, Optional[float]]) -> SeedResult:
    return run_seed(*args)


def method_directory(root: Path, name: str) -> Path:
    return root / re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def _meta(method: MethodSpec, results: List[SeedResult], stop_grad_sq: Optional[float]) -> Dict[str, Any]:
    reference = results[0].trace
    return {
        "method": method.name,
        "estimator": method.estimator,
        "p": method.p,
        "T": method.T,
        "clients": method.clients,
        "gamma": reference.gamma,
        "provenance": reference.provenance,
        "theorem": reference.theorem,
        "bound": reference.summary.get("bound"),
        "stop_grad_sq": stop_grad_sq,
        "seeds": [r.seed for r in results],
        "diverged_seeds": [r.seed for r in results if r.diverged],
        "failed_seeds": [r.seed for r in results if r.failed],
        "runs": [{"seed": r.seed, "diverged": r.diverged, "failed": r.failed, "rows": len(r.trace),
                  **({"message": r.message} if r.message else {}),
                  **{k: v for k, v in r.trace.summary.items() if k != "wall_time"}} for r in results],
    }


def run_experiment(experiment: ExperimentConfig, assumptions: bool = False) -> List[Dict[str, Any]]:
    """Run every method on every seed and write traces, aggregates and summaries

    Returns:
        Summary rows, one per method
    """
    out = Path(experiment.output_directory)
    out.mkdir(parents=True, exist_ok=True)
    problem = experiment.problem.build()
    W0 = experiment.problem.initial_point(problem)
    logger.info(f"Experiment with {len(experiment.methods)} methods x {len(experiment.seeds)} seeds into {out}")
    for method in experiment.methods:
        jobs = [(problem, W0, method, seed, experiment.stop_grad_sq) for seed in experiment.seeds]
        if experiment.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=experiment.jobs) as pool:
                results = list(pool.map(_run_seed_job, jobs))
        else:
            results = [_run_seed_job(job) for job in jobs]
        directory = method_directory(out, method.name)
        directory.mkdir(parents=True, exist_ok=True)
        for result in results:
            write_trace_csv(directory / f"seed-{result.seed}.csv", result.trace)
        traces = [read_trace_csv(directory / f"seed-{r.seed}.csv") for r in results]
        write_aggregate_csv(directory / "aggregate.csv", traces)
        write_meta(directory / "meta.yaml", _meta(method, results, experiment.stop_grad_sq))
        diverged = sum(r.diverged for r in results)
        failed = sum(r.failed for r in results)
        logger.info(f"{method.name}: {len(results) - diverged - failed} runs finished, "
                    f"{diverged} diverged, {failed} failed")
    block = assumption_block(experiment, problem) if assumptions else ""
    metadata = {"config": experiment.source, "seeds": list(experiment.seeds),
                "problem": experiment.problem.kind, "stop_grad_sq": experiment.stop_grad_sq}
    return write_summary(out, experiment.stop_grad_sq, metadata, block)


def assumption_block(experiment: ExperimentConfig, problem: Optional[Problem] = None, probes: int = 20,
                     names: Optional[List[str]] = None) -> str:
    """Assumption reports of every method, as one text block"""
    problem = experiment.problem.build() if problem is None else problem
    W0 = experiment.problem.initial_point(problem)
    seed = experiment.seeds[0]
    blocks = []
    for method in experiment.methods:
        left, right = method.sketch_specs(problem.shape)
        weights = spectral_weights(method.p, left, right)
        setup = method.federated_setup(problem, seed)
        params = derive_constants(problem, method.estimator, weights, W0, method.T, b=method.b, q=method.q,
                                  batch_size=method.batch_size,
                                  clients=setup.clients if setup else None,
                                  compressors=setup.compressors if setup else None)
        rng = np.random.default_rng(seed)
        reports = [check_assumption(name, problem, params, probes, rng, sketches=(method.p, left, right),
                                    clients=setup.clients if setup else None,
                                    compressors=setup.compressors if setup and method.estimator == "qgd" else None,
                                    batch_size=method.batch_size)
                   for name in (names or ASSUMPTIONS)]
        blocks.append(f"[{method.name}]\n{format_reports(reports)}")
    return "\n\n".join(blocks)


def _split_overrides(argv: List[str]) -> Tuple[List[str], Dict[str, str]]:
    """Pull +key=value arguments out before argparse sees them"""
    cleaned, overrides = [], {}
    for arg in argv:
        if arg.startswith('+') and '=' in arg:
            key, value = arg[1:].split('=', 1)
            overrides[key] = value
        else:
            cleaned.append(arg)
    return cleaned, overrides


def _key_values(items: List[str]) -> Dict[str, str]:
    values = {}
    for item in items:
        if '=' not in item:
            raise ConfigurationError(f"expected key=value, got '{item}'", "params")
        key, value = item.split('=', 1)
        values[key.strip()] = value.strip()
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blora", description='Bernoulli-LoRA optimization experiments.',
                                     formatter_class=argparse.RawTextHelpFormatter)
    parser.add_argument('--version', action='store_true', help='Show version information and exit')
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable verbose output')
    commands = parser.add_subparsers(dest='command')

    run = commands.add_parser('run', help='Run an experiment configuration',
                              formatter_class=argparse.RawTextHelpFormatter)
    run.add_argument('config', nargs='?', help='Path to YAML experiment configuration')
    run.add_argument('--generate-config', '-g', type=str,
                     help='Generate default configuration file at specified path.\n'
                          'Can be combined with overrides using +key=value syntax, for example:\n'
                          '  --generate-config exp.yaml +method.estimator=page +method.q=0.05')
    run.add_argument('--seeds', type=str, help='Seeds as a comma list or an inclusive first:last range')
    run.add_argument('--out', '-o', type=str, help='Output directory, overrides output.directory')
    run.add_argument('--jobs', '-j', type=int, help='Concurrent seed processes, overrides output.jobs')
    run.add_argument('--stop-grad-sq', type=float, help='Stop a run once ||grad f||^2 falls below this')
    run.add_argument('--assumptions', action='store_true', help='Append assumption checks to the summary')

    summary = commands.add_parser('summarize', help='Summarize a run directory')
    summary.add_argument('directory', help='Directory written by blora run')
    summary.add_argument('--stop-grad-sq', type=float, help='Threshold for iterations-to-threshold')

    check = commands.add_parser('check-assumptions', help='Probe the assumptions of an experiment configuration')
    check.add_argument('config', help='Path to YAML experiment configuration')
    check.add_argument('--probes', type=int, default=20, help='Probe points per assumption')
    check.add_argument('--only', action='append', choices=ASSUMPTIONS, help='Check only these assumptions')

    stepsize = commands.add_parser('stepsize', help='Evaluate a theorem stepsize from key=value constants')
    stepsize.add_argument('theorem', help='Theorem name, e.g. gd, page, ef21-pl, nonsmooth-constant')
    stepsize.add_argument('params', nargs='*', help='Constants such as L=1 q=0.5 lambda_max=1')
    stepsize.add_argument('--bound', action='store_true', help='Also print the rate bound at that stepsize')
    return parser


def _dispatch(args: argparse.Namespace, overrides: Dict[str, str]) -> int:
    if args.command == 'run':
        if args.generate_config:
            return 0 if Config.generate_default_config(args.generate_config, overrides) else 1
        if not args.config:
            raise ConfigurationError("a configuration file is required", "config")
        experiment = load_experiment(args.config, overrides, seeds=args.seeds, out=args.out,
                                     stop_grad_sq=args.stop_grad_sq, jobs=args.jobs)
        rows = run_experiment(experiment, assumptions=args.assumptions)
        print(render_text(rows), end="")
        return 0
    if args.command == 'summarize':
        rows = write_summary(Path(args.directory), args.stop_grad_sq)
        print(render_text(rows), end="")
        return 0
    if args.command == 'check-assumptions':
        experiment = load_experiment(args.config, overrides)
        print(assumption_block(experiment, probes=args.probes, names=args.only))
        return 0
    if args.command == 'stepsize':
        params = TheoryParams.from_mapping(_key_values(args.params))
        gamma = theoretical_stepsize(args.theorem, params)
        print(repr(gamma))
        if args.bound:
            print(repr(rate_bound(args.theorem, params, gamma)))
        return 0
    build_parser().print_help()
    return 2


def main(argv: Optional[List[str]] = None) -> int:
    cleaned, overrides = _split_overrides(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(cleaned)
    if args.version:
        print(f"bLoRA {get_version()}")
        return 0
    setup_logging(args.verbose)
    try:
        return _dispatch(args, overrides)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except FileNotFoundError as e:
        logger.error(str(e))
        return 2
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        logger.error(f"Invalid YAML{where}: {e}")
        return 2
    except InputError as e:
        logger.error(str(e))
        return 2
    except BLoRAError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    except Exception as e:
        import traceback
        logger.error(f"Unexpected error: {e}\nTraceback: {traceback.format_exc()}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
