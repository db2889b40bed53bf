#!/usr/bin/env python3
"""Trace CSV files, per-method aggregates and the experiment summary.

Layout of an output directory::

    <out>/<method>/seed-<s>.csv    one trace per seed
    <out>/<method>/aggregate.csv   per-iteration median and quartiles
    <out>/<method>/meta.yaml       stepsize, theorem, bound and per-seed summaries
    <out>/summary.md               front-matter header and a table
    <out>/summary.txt              the same table in fixed width
"""

import csv
import io
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import frontmatter
import numpy as np
import yaml
from jinja2 import Template

from .common import CSV_HEADER, InputError
from .logs import setup_logging
from .version import get_version

logger = setup_logging()

AGGREGATED_COLUMNS = ("f", "grad_sq_norm", "estimator_gap", "lyapunov", "comm_scalars")
AGGREGATE_HEADER = ["iter", "seeds"] + [f"{c}_{s}" for c in AGGREGATED_COLUMNS for s in ("median", "p25", "p75")]
SUMMARY_COLUMNS = ("method", "seeds", "diverged", "iterations", "final_grad_sq", "comm_scalars",
                   "gamma", "theorem", "bound", "observed", "bound_ok")

SUMMARY_TEMPLATE = Template(
    "| Method | Seeds | Diverged | Iterations to threshold | Final median ||grad f||^2 "
    "| Comm scalars | gamma | Theorem | Bound | Observed | Bound holds |\n"
    "|---|---|---|---|---|---|---|---|---|---|---|\n"
    "{% for row in rows %}"
    "| {{ row.method }} | {{ row.seeds }} | {{ row.diverged }} | {{ row.iterations }} "
    "| {{ '%.6g' % row.final_grad_sq }} | {{ '%.6g' % row.comm_scalars }} | {{ row.gamma }} "
    "| {{ row.theorem }} | {{ '%.6g' % row.bound }} | {{ '%.6g' % row.observed }} | {{ row.bound_ok }} |\n"
    "{% endfor %}"
    "{% if assumptions %}\n## Assumption checks\n\n```\n{{ assumptions }}\n```\n{% endif %}"
)


def format_value(value: Any) -> str:
    """Shortest round-trip text of a CSV cell"""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def write_trace_csv(path, trace) -> None:
    """One row per recorded iteration under the fixed CSV header"""
    write_rows(Path(path), CSV_HEADER, trace.rows)


def read_trace_csv(path) -> Dict[str, list]:
    """Columns of a trace CSV; numeric columns as floats, side as strings

    Raises:
        InputError: Header or a row is malformed, the message names the file
    """
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise InputError(f"{path}: unexpected header {header}")
        columns: Dict[str, list] = {name: [] for name in CSV_HEADER}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise InputError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                for name, cell in zip(CSV_HEADER, row):
                    columns[name].append(cell if name == "side" else float(cell))
            except ValueError as e:
                raise InputError(f"{path}:{lineno}: {e}")
    return columns


def aggregate_traces(traces: List[Dict[str, list]]) -> List[list]:
    """Per-iteration median, 25th and 75th percentile across seeds

    Shorter traces (early stopped) are carried forward with their last row.
    """
    traces = [t for t in traces if t["iter"]]
    if not traces:
        return []
    length = max(len(t["iter"]) for t in traces)
    stacked = {}
    for name in AGGREGATED_COLUMNS:
        values = np.empty((len(traces), length))
        for i, t in enumerate(traces):
            column = np.asarray(t[name], dtype=np.float64)
            values[i, :column.size] = column
            values[i, column.size:] = column[-1]
        stacked[name] = values
    rows = []
    for j in range(length):
        row = [j, len(traces)]
        for name in AGGREGATED_COLUMNS:
            column = stacked[name][:, j]
            if np.all(np.isnan(column)):
                row.extend([math.nan] * 3)
            else:
                row.extend(float(v) for v in np.nanpercentile(column, [50, 25, 75]))
        rows.append(row)
    return rows


def write_aggregate_csv(path, traces: List[Dict[str, list]]) -> int:
    rows = aggregate_traces(traces)
    write_rows(Path(path), AGGREGATE_HEADER, rows)
    return len(rows)


def _plain(value: Any) -> Any:
    """YAML-safe scalars: numpy types to Python, non-finite floats kept as strings"""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    return value


def write_meta(path, meta: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(_plain(meta), f, default_flow_style=False, sort_keys=True)


def read_meta(path) -> Dict[str, Any]:
    with open(path) as f:
        return yaml.safe_load(f) or {}


def _number(value: Any) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return math.nan


def summarize_method(directory: Path, threshold: Optional[float] = None) -> Dict[str, Any]:
    """Summary row of one method directory"""
    meta_path = directory / "meta.yaml"
    meta = read_meta(meta_path) if meta_path.exists() else {}
    traces = [read_trace_csv(p) for p in sorted(directory.glob("seed-*.csv"))]
    rows = aggregate_traces(traces)
    threshold = threshold if threshold is not None else meta.get("stop_grad_sq")
    median_gsq = [row[2 + 3 * AGGREGATED_COLUMNS.index("grad_sq_norm")] for row in rows]
    iterations = "-"
    if threshold is not None:
        reached = [i for i, v in enumerate(median_gsq) if v <= float(threshold)]
        iterations = str(reached[0]) if reached else "plateau"
    runs = [r for r in (meta.get("runs") or []) if not (r.get("diverged") or r.get("failed"))]
    observed = float(np.mean([_number(r.get("observed")) for r in runs])) if runs else math.nan
    bound = _number(meta.get("bound"))
    bound_ok = "-" if math.isnan(bound) or math.isnan(observed) else ("yes" if observed <= bound else "no")
    comm_index = 2 + 3 * AGGREGATED_COLUMNS.index("comm_scalars")
    gamma = meta.get("gamma")
    return {
        "method": meta.get("method", directory.name),
        "seeds": len(traces),
        "diverged": len(meta.get("diverged_seeds") or []),
        "iterations": iterations,
        "final_grad_sq": median_gsq[-1] if median_gsq else math.nan,
        "comm_scalars": rows[-1][comm_index] if rows else math.nan,
        "gamma": "polyak" if gamma is None else f"{_number(gamma):.6g} ({meta.get('provenance', 'analytic')})",
        "theorem": meta.get("theorem") or "-",
        "bound": bound,
        "observed": observed,
        "bound_ok": bound_ok,
    }


def summarize(directory, threshold: Optional[float] = None) -> List[Dict[str, Any]]:
    """One summary row per method subdirectory holding trace CSVs"""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"{directory}: not a directory")
    methods = sorted(p for p in directory.iterdir() if p.is_dir() and any(p.glob("seed-*.csv")))
    if not methods:
        logger.warning(f"No trace CSVs found under {directory}")
        return []
    return [summarize_method(p, threshold) for p in methods]


def render_text(rows: List[Dict[str, Any]]) -> str:
    """Fixed-width table"""
    header = f"{'method':<24} {'seeds':>5} {'div':>4} {'iters':>9} {'final_gsq':>12} {'comm':>12} " \
             f"{'bound':>12} {'observed':>12} {'ok':>3}  theorem"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['method']:<24} {row['seeds']:>5} {row['diverged']:>4} {row['iterations']:>9} "
                     f"{row['final_grad_sq']:>12.4e} {row['comm_scalars']:>12.4g} {row['bound']:>12.4e} "
                     f"{row['observed']:>12.4e} {row['bound_ok']:>3}  {row['theorem']}")
    return "\n".join(lines) + "\n"


def render_markdown(rows: List[Dict[str, Any]], metadata: Dict[str, Any], assumptions: str = "") -> bytes:
    post = frontmatter.Post(content=SUMMARY_TEMPLATE.render(rows=rows, assumptions=assumptions))
    post.metadata = _plain({"generator": f"bLoRA {get_version()}", **metadata})
    b = io.BytesIO()
    frontmatter.dump(post, b)
    return bytes(b.getbuffer())


def write_summary(directory, threshold: Optional[float] = None, metadata: Optional[Dict[str, Any]] = None,
                  assumptions: str = "") -> List[Dict[str, Any]]:
    """Write summary.md and summary.txt for a run directory and return the rows"""
    directory = Path(directory)
    rows = summarize(directory, threshold)
    metadata = {"title": f"Summary of {directory.name}", "methods": [r["method"] for r in rows], **(metadata or {})}
    with open(directory / "summary.md", "wb") as f:
        f.write(render_markdown(rows, metadata, assumptions))
    with open(directory / "summary.txt", "w") as f:
        f.write(render_text(rows))
    logger.info(f"Wrote summary of {len(rows)} methods to {directory}")
    return rows
