"""Learned annotator that labels generated images, and the verdicts and annotation files built on it."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from context_debias.classifier import (
    ClassifierConfig,
    TrainedClassifier,
    load_classifier,
    save_classifier,
    train_classifier,
)
from context_debias.edit_requests import GenerationRecord
from context_debias.errors import AnnotatorStateError, PreconditionError
from context_debias.layout import synth_unbiased
from context_debias.scenegen import ImageSample
from context_debias.schema import CategorySchema

LOGGER = logging.getLogger("context-debias")


@dataclass(eq=False)
class Annotator:
    classifier: TrainedClassifier | None
    thresholds: dict[str, float] = field(default_factory=dict)

    def require_trained(self) -> TrainedClassifier:
        if self.classifier is None or not self.thresholds:
            raise AnnotatorStateError("Annotator is not trained")
        return self.classifier

    def labels_for(self, pixels: Sequence[np.ndarray]) -> list[frozenset[str]]:
        classifier = self.require_trained()
        fake = [ImageSample(str(i), p, {}, frozenset(), (None, None), "train") for i, p in enumerate(pixels)]
        probs = classifier.predict_proba(fake)
        cats = classifier.categories
        return [
            frozenset(c for j, c in enumerate(cats) if row[j] >= self.thresholds.get(c, 0.5))
            for row in probs
        ]


def train_annotator(
    schema: CategorySchema,
    *,
    n_images: int,
    seed: int,
    image_size: int,
    config: ClassifierConfig,
    threshold: float = 0.5,
    blank_fraction: float = 0.05,
) -> tuple[Annotator, float]:
    """Multi-label annotator trained on independent grammar scenes; returns it with held-out set accuracy."""
    if not 0.0 < threshold < 1.0:
        raise PreconditionError("Annotator threshold must lie in (0,1)")
    data = synth_unbiased(schema, n=n_images, seed=seed, image_size=image_size, blank_fraction=blank_fraction)
    held_out = synth_unbiased(
        schema, n=max(50, n_images // 10), seed=seed + 1, image_size=image_size, blank_fraction=blank_fraction
    )
    classifier, _ = train_classifier(data, schema.categories, replace(config, mode="multi_label", seed=seed))
    annotator = Annotator(classifier, {c: threshold for c in schema.categories})
    accuracy = annotator_accuracy(annotator, held_out)
    LOGGER.info("Annotator trained images=%s held_out=%s exact_set_accuracy=%.4f", len(data), len(held_out), accuracy)
    return annotator, accuracy


def annotator_accuracy(annotator: Annotator, samples: Sequence[ImageSample]) -> float:
    """Fraction of images whose predicted label set equals the true set exactly."""
    if not samples:
        return float("nan")
    predicted = annotator.labels_for([s.pixels for s in samples])
    return sum(1 for s, p in zip(samples, predicted, strict=True) if p == s.labels) / len(samples)


def save_annotator(annotator: Annotator, directory: Path) -> None:
    save_classifier(annotator.require_trained(), directory / "annotator.pt")
    (directory / "thresholds.json").write_text(json.dumps(annotator.thresholds, sort_keys=True), encoding="utf-8")


def load_annotator(directory: Path) -> Annotator:
    thresholds = json.loads((directory / "thresholds.json").read_text(encoding="utf-8"))
    return Annotator(load_classifier(directory / "annotator.pt"), {str(k): float(v) for k, v in thresholds.items()})


def annotate(record: GenerationRecord, annotator: Annotator) -> frozenset[str]:
    """Labels above threshold; stored on the record."""
    annotator.require_trained()
    if not record.ok or record.pixels is None:
        record.annotator_labels = frozenset()
        return record.annotator_labels
    (labels,) = annotator.labels_for([record.pixels])
    record.annotator_labels = labels
    return labels


def annotate_records(records: Sequence[GenerationRecord], annotator: Annotator) -> None:
    """Batched ``annotate`` over ``records`` followed by their verdicts."""
    annotator.require_trained()
    ready = [r for r in records if r.ok and r.pixels is not None]
    labels = annotator.labels_for([r.pixels for r in ready if r.pixels is not None]) if ready else []
    for record, found in zip(ready, labels, strict=True):
        record.annotator_labels = found
    for record in records:
        if record.annotator_labels is None:
            record.annotator_labels = frozenset()
        if record.verdict == "pending":
            outcome = verdict(record.annotator_labels, record.request.biased, record.request.context)
            record.set_verdict(outcome if record.ok else "rejected")


def verdict(labels: Iterable[str], b: str, c: str) -> str:
    present = set(labels)
    return "accepted" if b in present and c not in present else "rejected"


def write_annotations(records: Sequence[GenerationRecord], path: Path) -> None:
    ordered = sorted(records, key=lambda r: r.request.request_id)
    lines = [json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) for r in ordered]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def apply_annotations(records: Sequence[GenerationRecord], path: Path) -> None:
    """Copy stored annotator labels and verdicts onto freshly loaded records."""
    stored: dict[str, dict[str, Any]] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            raw = json.loads(line)
            stored[str(raw["request"]["request_id"])] = raw
    for record in records:
        raw = stored.get(record.request.request_id)
        if raw is None:
            continue
        labels = raw.get("annotator_labels")
        record.annotator_labels = None if labels is None else frozenset(labels)
        record.verdict = str(raw.get("verdict") or "pending")
