from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from context_debias.cooccurrence import CooccurrenceMatrix
from context_debias.errors import InsufficientDataError, UndefinedScoreError
from context_debias.predictions import PredictionTable

LOGGER = logging.getLogger("context-debias")

ScoreTable = Mapping[tuple[str, str], float | None]


@dataclass(frozen=True)
class BiasPair:
    biased: str
    context: str
    score: float

    def to_dict(self) -> dict[str, Any]:
        return {"biased": self.biased, "context": self.context, "score": self.score}


def split_subsets(
    labels: Mapping[str, Iterable[str]], image_ids: Iterable[str], b: str, c: str
) -> tuple[list[str], list[str]]:
    """(cooccur ids, exclusive ids) for the pair among ``image_ids``."""
    cooccur: list[str] = []
    exclusive: list[str] = []
    for image_id in image_ids:
        present = labels.get(image_id)
        if present is None:
            continue
        present = frozenset(present)
        if b not in present:
            continue
        (cooccur if c in present else exclusive).append(image_id)
    return cooccur, exclusive


def _aggregate(values: np.ndarray, aggregation: str) -> float:
    if aggregation == "mean":
        return float(np.mean(values))
    if aggregation == "median":
        return float(np.median(values))
    raise ValueError(f"Unknown bias-score aggregation={aggregation}")


def bias_score(
    preds: PredictionTable,
    labels: Mapping[str, Iterable[str]],
    b: str,
    c: str,
    *,
    aggregation: str = "mean",
) -> float:
    """Mean prob(b) over cooccur images divided by mean prob(b) over exclusive images."""
    cooccur, exclusive = split_subsets(labels, preds.image_ids, b, c)
    if not cooccur or not exclusive:
        raise UndefinedScoreError(
            f"Bias score undefined biased={b} context={c} cooccur={len(cooccur)} exclusive={len(exclusive)}"
        )
    num = _aggregate(preds.values_for(cooccur, b), aggregation)
    den = _aggregate(preds.values_for(exclusive, b), aggregation)
    if den <= 0.0:
        raise UndefinedScoreError(f"Bias score undefined biased={b} context={c} exclusive_mean=0")
    return num / den


def score_candidates(
    preds: PredictionTable,
    labels: Mapping[str, Iterable[str]],
    *,
    objects: Sequence[str],
    contexts: Sequence[str],
    train_labels: Mapping[str, Iterable[str]],
    min_count: int = 10,
    aggregation: str = "mean",
) -> dict[tuple[str, str], float | None]:
    """Score every (b, c) whose train co-occurrence count reaches ``min_count``; undefined -> None."""
    train_sets = [frozenset(v) for v in train_labels.values()]
    scores: dict[tuple[str, str], float | None] = {}
    for b in objects:
        for c in contexts:
            if c == b:
                continue
            count = sum(1 for s in train_sets if b in s and c in s)
            if count < min_count:
                continue
            try:
                scores[(b, c)] = bias_score(preds, labels, b, c, aggregation=aggregation)
            except UndefinedScoreError as exc:
                LOGGER.warning("Skipping candidate with undefined score error=%s", exc)
                scores[(b, c)] = None
    return scores


def _ranked(scores: ScoreTable, b: str) -> list[tuple[float, str]]:
    ranked = [
        (float(s), c)
        for (bb, c), s in scores.items()
        if bb == b and s is not None and math.isfinite(float(s))
    ]
    ranked.sort(reverse=True)
    return ranked


def identify_biased_pairs(scores: ScoreTable, threshold: float) -> list[BiasPair]:
    """For each b, the context with the highest score, kept when it reaches ``threshold``.

    Ranking key is the tuple (score, context id) in descending order, so ties go to the
    lexicographically larger context id.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pairs: list[BiasPair] = []
    for b in sorted({b for b, _ in scores}):
        ranked = _ranked(scores, b)
        if ranked and ranked[0][0] >= threshold:
            pairs.append(BiasPair(b, ranked[0][1], ranked[0][0]))
    pairs.sort(key=lambda p: (p.score, p.biased, p.context), reverse=True)
    return pairs


def second_context(b: str, scores: ScoreTable) -> BiasPair:
    ranked = _ranked(scores, b)
    if len(ranked) < 2:
        raise InsufficientDataError(f"Need at least two scored contexts biased={b} have={len(ranked)}")
    score, context = ranked[1]
    return BiasPair(b, context, score)


def scores_to_list(scores: ScoreTable) -> list[dict[str, Any]]:
    return [
        {"biased": b, "context": c, "score": None if s is None else float(s)}
        for (b, c), s in sorted(scores.items())
    ]


def write_bias_report(
    path: Path,
    *,
    pairs: Sequence[BiasPair],
    scores: ScoreTable,
    second: Mapping[str, BiasPair | None],
    cooccur: CooccurrenceMatrix,
    split: str,
    threshold: float,
) -> None:
    payload = {
        "split": split,
        "threshold": threshold,
        "pairs": [p.to_dict() for p in pairs],
        "second_contexts": {b: (p.to_dict() if p is not None else None) for b, p in sorted(second.items())},
        "scores": scores_to_list(scores),
        "cooccur_train": cooccur.to_dict(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2), encoding="utf-8")


def read_bias_pairs(path: Path) -> tuple[list[BiasPair], dict[str, BiasPair | None]]:
    raw = json.loads(path.read_text(encoding="utf-8"))
    pairs = [BiasPair(str(p["biased"]), str(p["context"]), float(p["score"])) for p in raw.get("pairs") or []]
    second: dict[str, BiasPair | None] = {}
    for b, p in (raw.get("second_contexts") or {}).items():
        second[str(b)] = None if p is None else BiasPair(str(p["biased"]), str(p["context"]), float(p["score"]))
    return pairs, second
