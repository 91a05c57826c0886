from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from context_debias.errors import PreconditionError
from context_debias.manifest import MANIFEST_NAME
from context_debias.metrics_report import METRIC_KEYS, MetricsReport, read_report
from context_debias.plots import comparison_bars

LOGGER = logging.getLogger("context-debias")

TEMPLATES_DIR = Path(__file__).with_name("templates")
BASELINE = "standard"


def _environment() -> Environment:
    return Environment(
        loader=FileSystemLoader(str(TEMPLATES_DIR)),
        undefined=StrictUndefined,
        autoescape=False,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )


def render_template(name: str, **context: Any) -> str:
    return _environment().get_template(name).render(**context)


def fmt_value(value: float | None, digits: int = 4) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def load_run_reports(run_dir: Path) -> tuple[int, dict[str, MetricsReport]]:
    """Seed of an evaluated run and its per-method metric reports."""
    try:
        manifest = json.loads((run_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PreconditionError(f"Run has no readable manifest run={run_dir} error={exc}") from exc
    status = ((manifest.get("stages") or {}).get("evaluate") or {}).get("status")
    if status != "done":
        raise PreconditionError(f"Run is not evaluated run={run_dir} status={status}")
    reports = {}
    for path in sorted((run_dir / "evaluate").glob("metrics_*.json")):
        report = read_report(path)
        reports[report.method] = report
    if not reports:
        raise PreconditionError(f"Run has no metric reports run={run_dir}")
    return int(manifest.get("seed") or 0), reports


@dataclass
class Comparison:
    methods: list[str]
    metrics: list[str]
    seeds: list[int]
    table: dict[str, dict[str, dict[str, float | int | None]]] = field(default_factory=dict)
    best: dict[str, str | None] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "methods": self.methods,
            "metrics": self.metrics,
            "seeds": self.seeds,
            "table": self.table,
            "best": self.best,
        }


def _stats(values: Sequence[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), sd


def compare_runs(
    runs: Mapping[int, Mapping[str, MetricsReport]],
    metric_keys: Sequence[str] = METRIC_KEYS,
) -> Comparison:
    """Mean and sample standard deviation over seeds per method and metric, with deltas against the standard baseline.

    Methods evaluated on different seed sets are compared on the seeds they share.
    """
    if not runs:
        raise PreconditionError("Nothing to compare")
    seeds_by_method: dict[str, set[int]] = {}
    for seed, reports in runs.items():
        for method in reports:
            seeds_by_method.setdefault(method, set()).add(seed)
    shared = set.intersection(*seeds_by_method.values())
    if any(s != shared for s in seeds_by_method.values()):
        LOGGER.warning(
            "Mismatched seed counts across methods counts=%s using_seeds=%s",
            {m: len(s) for m, s in sorted(seeds_by_method.items())},
            sorted(shared),
        )
    if not shared:
        raise PreconditionError("Methods share no evaluated seed")
    seeds = sorted(shared)
    methods = sorted(seeds_by_method, key=lambda m: (m != BASELINE, m))

    comparison = Comparison(methods=methods, metrics=list(metric_keys), seeds=seeds)
    for method in methods:
        row: dict[str, dict[str, float | int | None]] = {}
        for key in metric_keys:
            values = [v for v in (runs[s][method].metric(key) for s in seeds) if v is not None]
            mean, sd = _stats(values)
            row[key] = {"mean": mean, "sd": sd, "n": len(values)}
        comparison.table[method] = row

    baseline = comparison.table.get(BASELINE)
    for method, row in comparison.table.items():
        for key, cell in row.items():
            ref = baseline[key]["mean"] if baseline is not None else None
            cell["delta"] = None if cell["mean"] is None or ref is None else float(cell["mean"]) - float(ref)
    for key in metric_keys:
        ranked = [(float(row[key]["mean"]), m) for m, row in comparison.table.items() if row[key]["mean"] is not None]
        comparison.best[key] = max(ranked)[1] if ranked else None
    return comparison


def compare_run_dirs(run_dirs: Sequence[Path], metric_keys: Sequence[str] = METRIC_KEYS) -> Comparison:
    runs: dict[int, dict[str, MetricsReport]] = {}
    for run_dir in run_dirs:
        seed, reports = load_run_reports(run_dir)
        if seed in runs:
            LOGGER.warning("Duplicate seed across runs seed=%s run=%s ignored", seed, run_dir)
            continue
        runs[seed] = reports
    return compare_runs(runs, metric_keys)


def _cell(cell: Mapping[str, Any], bold: bool) -> str:
    if cell["mean"] is None:
        return "n/a"
    text = f"{cell['mean']:.4f} ± {cell['sd']:.4f}"
    return f"**{text}**" if bold else text


def _delta(cell: Mapping[str, Any]) -> str:
    return "n/a" if cell.get("delta") is None else f"{cell['delta']:+.4f}"


def write_comparison(comparison: Comparison, out_dir: Path) -> None:
    """``comparison.json``, ``comparison.md`` and ``comparison.png`` under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(comparison.to_dict(), ensure_ascii=True, allow_nan=False, sort_keys=True, indent=2)
    (out_dir / "comparison.json").write_text(text + "\n", encoding="utf-8")
    rows = [
        {
            "method": method,
            "cells": [
                (
                    _cell(comparison.table[method][k], comparison.best.get(k) == method),
                    _delta(comparison.table[method][k]),
                )
                for k in comparison.metrics
            ],
        }
        for method in comparison.methods
    ]
    md = render_template(
        "comparison.md.j2", metrics=comparison.metrics, seeds=comparison.seeds, rows=rows, baseline=BASELINE
    )
    (out_dir / "comparison.md").write_text(md, encoding="utf-8")
    comparison_bars(comparison.table, comparison.metrics, out_dir / "comparison.png")
    LOGGER.info(
        "Comparison written path=%s methods=%s seeds=%s", out_dir, len(comparison.methods), len(comparison.seeds)
    )
