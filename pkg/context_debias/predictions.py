from __future__ import annotations

import csv
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from context_debias.errors import DimensionError, SchemaError


@dataclass(frozen=True, eq=False)
class PredictionTable:
    """Per-image predicted probabilities, one column per category."""

    image_ids: tuple[str, ...]
    categories: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (len(self.image_ids), len(self.categories)):
            raise DimensionError(
                f"Prediction shape {probs.shape} does not match ids={len(self.image_ids)} "
                f"categories={len(self.categories)}"
            )
        if len(set(self.image_ids)) != len(self.image_ids):
            raise SchemaError("Prediction table has duplicate image ids")
        if probs.size and (np.nanmin(probs) < 0.0 or np.nanmax(probs) > 1.0 or not np.isfinite(probs).all()):
            raise SchemaError("Prediction probabilities must be finite and lie in [0,1]")
        object.__setattr__(self, "probs", probs)

    def column(self, category: str) -> np.ndarray:
        try:
            return self.probs[:, self.categories.index(category)]
        except ValueError:
            raise SchemaError(f"Category not in prediction table id={category}") from None

    def values_for(self, image_ids: Iterable[str], category: str) -> np.ndarray:
        row = {image_id: i for i, image_id in enumerate(self.image_ids)}
        col = self.column(category)
        return np.array([col[row[image_id]] for image_id in image_ids], dtype=np.float64)

    def scaled(self, k: float) -> PredictionTable:
        """Every probability times ``k``.

        The product must stay a probability, so ``k`` may not exceed ``1 / max(probs)``; a larger
        factor raises ``SchemaError``.
        """
        return PredictionTable(self.image_ids, self.categories, self.probs * float(k))


def write_predictions(table: PredictionTable, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", *table.categories])
        for image_id, row in zip(table.image_ids, table.probs, strict=True):
            writer.writerow([image_id, *(repr(float(x)) for x in row)])


def read_predictions(path: Path) -> PredictionTable:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:1] != ["image_id"]:
        raise SchemaError(f"Prediction CSV lacks an image_id header path={path}")
    categories = tuple(rows[0][1:])
    ids = tuple(r[0] for r in rows[1:])
    probs = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(ids), len(categories))
    return PredictionTable(ids, categories, probs)
