"""Evaluation report record and its JSON/CSV files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class MetricsReport:
    method: str
    per_class: dict[str, dict[str, float | None]]
    exclusive_map: float | None
    cooccur_map: float | None
    unbiased_map: float | None
    all_map: float | None
    acc: float | None = None
    wga: float | None = None
    group_accuracy: dict[str, float] = field(default_factory=dict)
    bias_scores: list[dict[str, Any]] = field(default_factory=list)
    cooccur_before: dict[str, Any] | None = None
    cooccur_after: dict[str, Any] | None = None
    new_pairs: list[dict[str, Any]] = field(default_factory=list)
    embedding: dict[str, Any] | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "per_class": self.per_class,
            "exclusive_map": self.exclusive_map,
            "cooccur_map": self.cooccur_map,
            "unbiased_map": self.unbiased_map,
            "all_map": self.all_map,
            "acc": self.acc,
            "wga": self.wga,
            "group_accuracy": self.group_accuracy,
            "bias_scores": self.bias_scores,
            "cooccur_before": self.cooccur_before,
            "cooccur_after": self.cooccur_after,
            "new_pairs": self.new_pairs,
            "embedding": self.embedding,
            "metadata": self.metadata,
        }

    def metric(self, key: str) -> float | None:
        value = self.to_dict().get(key)
        return None if value is None else float(value)


METRIC_KEYS = ("exclusive_map", "cooccur_map", "unbiased_map", "all_map", "acc", "wga")


# context-debias-allow-vague-signature
def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_report(report: MetricsReport, json_path: Path, csv_path: Path | None = None) -> None:
    json_path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_json_safe(report.to_dict()), ensure_ascii=True, allow_nan=False, sort_keys=True, indent=2)
    json_path.write_text(text + "\n", encoding="utf-8")
    if csv_path is None:
        return
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "exclusive_ap", "cooccur_ap", "ap"])
        for cls, row in sorted(report.per_class.items()):
            cells = ("" if row.get(k) is None else repr(row[k]) for k in ("exclusive_ap", "cooccur_ap", "ap"))
            writer.writerow([cls, *cells])


def read_report(path: Path) -> MetricsReport:
    raw = json.loads(path.read_text(encoding="utf-8"))
    return MetricsReport(
        method=str(raw["method"]),
        per_class=raw.get("per_class") or {},
        exclusive_map=raw.get("exclusive_map"),
        cooccur_map=raw.get("cooccur_map"),
        unbiased_map=raw.get("unbiased_map"),
        all_map=raw.get("all_map"),
        acc=raw.get("acc"),
        wga=raw.get("wga"),
        group_accuracy=raw.get("group_accuracy") or {},
        bias_scores=raw.get("bias_scores") or [],
        cooccur_before=raw.get("cooccur_before"),
        cooccur_after=raw.get("cooccur_after"),
        new_pairs=raw.get("new_pairs") or [],
        embedding=raw.get("embedding"),
        metadata=raw.get("metadata") or {},
    )
