from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from context_debias.bias_audit import BiasPair, bias_score, split_subsets
from context_debias.errors import UndefinedMetricError, UndefinedScoreError
from context_debias.metrics_report import MetricsReport
from context_debias.predictions import PredictionTable

LOGGER = logging.getLogger("context-debias")

Group = tuple[str | None, str | None]


def average_precision(
    scores: Sequence[float] | np.ndarray,
    positives: Sequence[bool] | np.ndarray,
    image_ids: Sequence[str] | None = None,
) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ranking is by descending score, ties by ascending image id (position when ids are absent).
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise UndefinedMetricError("scores and positives must be equal-length vectors")
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("Average precision undefined without positives")
    keys = np.asarray(image_ids) if image_ids is not None else np.arange(len(s))
    order = np.lexsort((keys, -s))
    ranked = pos[order]
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, len(ranked) + 1)
    return float(precision[ranked].sum() / n_pos)


@dataclass(frozen=True)
class EvalSubsets:
    pairs: tuple[BiasPair, ...]
    exclusive: Mapping[tuple[str, str], tuple[str, ...]]
    cooccur: Mapping[tuple[str, str], tuple[str, ...]]
    classes: tuple[str, ...]
    unbiased_classes: tuple[str, ...]
    groups: Mapping[str, Group] = field(default_factory=dict)
    excluded_groups: frozenset[Group] = frozenset()


def build_subsets(
    labels: Mapping[str, Iterable[str]],
    pairs: Sequence[BiasPair],
    *,
    classes: Sequence[str],
    groups: Mapping[str, Group] | None = None,
    min_group_count: int = 25,
) -> EvalSubsets:
    ids = sorted(labels)
    exclusive: dict[tuple[str, str], tuple[str, ...]] = {}
    cooccur: dict[tuple[str, str], tuple[str, ...]] = {}
    for pair in pairs:
        co, ex = split_subsets(labels, ids, pair.biased, pair.context)
        cooccur[(pair.biased, pair.context)] = tuple(co)
        exclusive[(pair.biased, pair.context)] = tuple(ex)
    biased = {p.biased for p in pairs}
    group_map = dict(groups or {})
    counts: dict[Group, int] = {}
    for g in group_map.values():
        counts[g] = counts.get(g, 0) + 1
    excluded = frozenset(g for g, n in counts.items() if n < min_group_count)
    return EvalSubsets(
        pairs=tuple(pairs),
        exclusive=exclusive,
        cooccur=cooccur,
        classes=tuple(classes),
        unbiased_classes=tuple(c for c in classes if c not in biased),
        groups=group_map,
        excluded_groups=excluded,
    )


def _mean(values: Iterable[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def _subset_ap(
    preds: PredictionTable, labels: Mapping[str, frozenset[str]], b: str, positive_ids: Sequence[str]
) -> float | None:
    if not positive_ids:
        LOGGER.warning("Skipping class with zero positives class=%s", b)
        return None
    negatives = [i for i in preds.image_ids if i in labels and b not in labels[i]]
    ids = [*positive_ids, *negatives]
    flags = [True] * len(positive_ids) + [False] * len(negatives)
    return average_precision(preds.values_for(ids, b), flags, ids)


def class_ap(preds: PredictionTable, labels: Mapping[str, frozenset[str]], category: str) -> float | None:
    ids = [i for i in preds.image_ids if i in labels]
    flags = [category in labels[i] for i in ids]
    if not any(flags):
        LOGGER.warning("Skipping class with zero positives class=%s", category)
        return None
    return average_precision(preds.values_for(ids, category), flags, ids)


def argmax_labels(preds: PredictionTable, classes: Sequence[str]) -> dict[str, str]:
    """Top class per image; ties go to the smallest class id."""
    ordered = sorted(classes)
    cols = np.stack([preds.column(c) for c in ordered], axis=1)
    winners = np.argmax(cols, axis=1)
    return {image_id: ordered[int(w)] for image_id, w in zip(preds.image_ids, winners, strict=True)}


def accuracy_and_wga(
    predicted: Mapping[str, str],
    truth: Mapping[str, str],
    groups: Mapping[str, Group],
    *,
    min_count: int = 25,
) -> tuple[float, float, dict[Group, float]]:
    """Overall accuracy, worst retained-group accuracy and every group's accuracy."""
    ids = [i for i in truth if i in predicted]
    if not ids:
        raise UndefinedMetricError("No predictions to score")
    correct = {i: predicted[i] == truth[i] for i in ids}
    acc = sum(correct.values()) / len(ids)
    per_group: dict[Group, list[bool]] = {}
    for i in ids:
        per_group.setdefault(groups[i], []).append(correct[i])
    group_acc = {g: sum(v) / len(v) for g, v in per_group.items()}
    retained = [g for g, v in per_group.items() if len(v) >= min_count]
    if not retained:
        raise UndefinedMetricError(f"Every group has fewer than {min_count} samples")
    return acc, min(group_acc[g] for g in retained), group_acc


def metric_suite(
    preds: PredictionTable,
    labels: Mapping[str, frozenset[str]],
    subsets: EvalSubsets,
    *,
    method: str = "standard",
    object_classes: Sequence[str] | None = None,
    min_group_count: int = 25,
) -> MetricsReport:
    """Exclusive/cooccur/unbiased/all mAP, plus Acc and WGA when every image holds exactly one object."""
    per_class: dict[str, dict[str, float | None]] = {}
    for pair in subsets.pairs:
        key = (pair.biased, pair.context)
        row = per_class.setdefault(pair.biased, {})
        row["exclusive_ap"] = _subset_ap(preds, labels, pair.biased, subsets.exclusive.get(key, ()))
        row["cooccur_ap"] = _subset_ap(preds, labels, pair.biased, subsets.cooccur.get(key, ()))
    for c in subsets.classes:
        per_class.setdefault(c, {})["ap"] = class_ap(preds, labels, c)

    biased = [p.biased for p in subsets.pairs]
    report = MetricsReport(
        method=method,
        per_class=per_class,
        exclusive_map=_mean(per_class[b].get("exclusive_ap") for b in biased),
        cooccur_map=_mean(per_class[b].get("cooccur_ap") for b in biased),
        unbiased_map=_mean(per_class[c].get("ap") for c in subsets.unbiased_classes),
        all_map=_mean(per_class[c].get("ap") for c in subsets.classes),
    )

    objects = tuple(object_classes or ())
    if objects and subsets.groups:
        truth: dict[str, str] = {}
        for image_id in preds.image_ids:
            present = [o for o in objects if o in labels.get(image_id, frozenset())]
            if len(present) != 1:
                truth = {}
                break
            truth[image_id] = present[0]
        if truth:
            try:
                acc, wga, group_acc = accuracy_and_wga(
                    argmax_labels(preds, objects), truth, subsets.groups, min_count=min_group_count
                )
                report.acc, report.wga = acc, wga
                ordered = sorted(group_acc.items(), key=lambda kv: str(kv[0]))
                report.group_accuracy = {f"{g[0]}|{g[1]}": v for g, v in ordered}
            except UndefinedMetricError as exc:
                LOGGER.warning("Skipping accuracy and WGA error=%s", exc)
    return report


def pair_bias_scores(
    preds: PredictionTable,
    labels: Mapping[str, frozenset[str]],
    pairs: Sequence[BiasPair],
    second: Mapping[str, BiasPair | None],
) -> list[dict[str, Any]]:
    """Bias score of each targeted pair and its second-highest context on ``preds``."""
    rows: list[dict[str, Any]] = []
    for pair in pairs:
        targets = [("target", pair.context)]
        runner_up = second.get(pair.biased)
        if runner_up is not None:
            targets.append(("second", runner_up.context))
        for role, ctx in targets:
            try:
                score: float | None = bias_score(preds, labels, pair.biased, ctx)
            except UndefinedScoreError as exc:
                LOGGER.warning("Bias score undefined in evaluation error=%s", exc)
                score = None
            rows.append({"biased": pair.biased, "context": ctx, "role": role, "score": score})
    return rows
