from __future__ import annotations

import json
import logging
from pathlib import Path

import pytest

from context_debias.compare import compare_run_dirs, compare_runs, load_run_reports, write_comparison
from context_debias.errors import PreconditionError
from context_debias.metrics_report import MetricsReport, write_report


def _report(method: str, exclusive: float, *, all_map: float = 0.5) -> MetricsReport:
    return MetricsReport(
        method=method,
        per_class={},
        exclusive_map=exclusive,
        cooccur_map=0.6,
        unbiased_map=None,
        all_map=all_map,
    )


def test_mean_and_sample_deviation_over_seeds() -> None:
    runs = {
        seed: {"standard": _report("standard", 0.2), "personalized": _report("personalized", value)}
        for seed, value in zip((0, 1, 2), (0.25, 0.27, 0.29), strict=True)
    }
    comparison = compare_runs(runs, ["exclusive_map", "unbiased_map"])
    cell = comparison.table["personalized"]["exclusive_map"]
    assert cell["mean"] == pytest.approx(0.27)
    assert cell["sd"] == pytest.approx(0.02)
    assert cell["n"] == 3
    assert cell["delta"] == pytest.approx(0.07)
    assert comparison.methods == ["standard", "personalized"]
    assert comparison.best["exclusive_map"] == "personalized"
    assert comparison.table["standard"]["unbiased_map"]["mean"] is None
    assert comparison.best["unbiased_map"] is None


def test_single_seed_has_zero_deviation() -> None:
    comparison = compare_runs({0: {"standard": _report("standard", 0.3)}}, ["exclusive_map"])
    cell = comparison.table["standard"]["exclusive_map"]
    assert cell["sd"] == 0.0
    assert cell["delta"] == 0.0


def test_mismatched_seeds_use_the_shared_ones(caplog: pytest.LogCaptureFixture) -> None:
    runs = {
        0: {"standard": _report("standard", 0.2), "real_cooccur": _report("real_cooccur", 0.3)},
        1: {"standard": _report("standard", 0.4)},
    }
    with caplog.at_level(logging.WARNING, logger="context-debias"):
        comparison = compare_runs(runs, ["exclusive_map"])
    assert comparison.seeds == [0]
    assert comparison.table["standard"]["exclusive_map"]["mean"] == pytest.approx(0.2)
    assert "Mismatched seed counts" in caplog.text


def _evaluated_run(root: Path, seed: int, status: str = "done") -> Path:
    run = root / f"run{seed}"
    (run / "evaluate").mkdir(parents=True)
    (run / "manifest.json").write_text(json.dumps({"seed": seed, "stages": {"evaluate": {"status": status}}}), encoding="utf-8")
    write_report(_report("standard", 0.2 + seed / 100), run / "evaluate" / "metrics_standard.json")
    write_report(_report("grammar_oracle", 0.4), run / "evaluate" / "metrics_grammar_oracle.json")
    return run


def test_run_directories_and_output_files(tmp_path: Path) -> None:
    runs = [_evaluated_run(tmp_path, seed) for seed in (0, 1)]
    comparison = compare_run_dirs(runs, ["exclusive_map", "all_map"])
    assert comparison.seeds == [0, 1]
    write_comparison(comparison, tmp_path / "cmp")
    saved = json.loads((tmp_path / "cmp" / "comparison.json").read_text(encoding="utf-8"))
    assert saved["best"]["exclusive_map"] == "grammar_oracle"
    md = (tmp_path / "cmp" / "comparison.md").read_text(encoding="utf-8")
    assert "**0.4000 ± 0.0000**" in md
    assert (tmp_path / "cmp" / "comparison.png").stat().st_size > 0


def test_unevaluated_run_is_rejected(tmp_path: Path) -> None:
    run = _evaluated_run(tmp_path, 0, status="running")
    with pytest.raises(PreconditionError, match="not evaluated"):
        load_run_reports(run)
    with pytest.raises(PreconditionError, match="no readable manifest"):
        load_run_reports(tmp_path / "missing")
