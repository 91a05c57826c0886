"""Conditional co-occurrence P(context | object) over label sets, and pairs an augmentation introduces."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

LOGGER = logging.getLogger("context-debias")


@dataclass(frozen=True, eq=False)
class CooccurrenceMatrix:
    """P(c | b) with NaN marking rows whose object never appears."""

    biased: tuple[str, ...]
    contexts: tuple[str, ...]
    values: np.ndarray
    object_counts: np.ndarray

    def get(self, biased: str, context: str) -> float | None:
        value = float(self.values[self.biased.index(biased), self.contexts.index(context)])
        return None if math.isnan(value) else value

    def to_dict(self) -> dict[str, Any]:
        return {
            "biased": list(self.biased),
            "contexts": list(self.contexts),
            "object_counts": [int(x) for x in self.object_counts],
            "values": [[None if math.isnan(v) else float(v) for v in row] for row in self.values],
        }


def cooccur_conditional(
    labels: Mapping[str, Iterable[str]],
    *,
    biased: Sequence[str],
    contexts: Sequence[str],
) -> CooccurrenceMatrix:
    """count(b and c) / count(b) for every (b, c); rows with count(b) = 0 are undefined (NaN)."""
    sets = [frozenset(v) for v in labels.values()]
    b_hot = np.array([[b in s for b in biased] for s in sets], dtype=np.float64).reshape(len(sets), len(biased))
    c_hot = np.array([[c in s for c in contexts] for s in sets], dtype=np.float64).reshape(len(sets), len(contexts))
    joint = b_hot.T @ c_hot
    counts = b_hot.sum(axis=0)
    values = np.full(joint.shape, np.nan)
    defined = counts > 0
    values[defined] = joint[defined] / counts[defined, None]
    for b, count in zip(biased, counts, strict=True):
        if count == 0:
            LOGGER.warning("Co-occurrence row undefined biased=%s count=0", b)
    return CooccurrenceMatrix(tuple(biased), tuple(contexts), values, counts.astype(np.int64))


@dataclass(frozen=True)
class NewPair:
    biased: str
    context: str
    before: float | None
    after: float


def newly_introduced_pairs(
    before: CooccurrenceMatrix,
    after: CooccurrenceMatrix,
    *,
    threshold: float = 0.3,
) -> list[NewPair]:
    """Pairs whose P(x|b) rises above ``threshold`` only after augmentation."""
    found: list[NewPair] = []
    for b in after.biased:
        for x in after.contexts:
            value = after.get(b, x)
            if value is None or value <= threshold:
                continue
            prior = before.get(b, x) if b in before.biased and x in before.contexts else None
            if prior is None or prior <= threshold:
                found.append(NewPair(b, x, prior, value))
    return found

