"""Edit requests against co-occurring source images and the records generation produces for them."""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from context_debias.bias_audit import BiasPair
from context_debias.errors import PreconditionError
from context_debias.scenegen import ImageSample
from context_debias.schema import CategorySchema
from context_debias.seeding import derive_seed, numpy_rng
from context_debias.tokens import PromptSpec

LOGGER = logging.getLogger("context-debias")

BACKENDS = ("personalized", "base_txt2img", "grammar_oracle")
VERDICTS = ("pending", "accepted", "rejected")


@dataclass(frozen=True)
class EditRequest:
    request_id: str
    source_id: str
    biased: str
    context: str
    mode: str
    replacement: str | None
    backend: str
    seed: int

    def __post_init__(self) -> None:
        if self.mode not in {"removal", "replacement"}:
            raise PreconditionError(f"Unknown edit mode={self.mode}")
        if (self.mode == "replacement") != (self.replacement is not None):
            raise PreconditionError(f"replacement is required iff mode=replacement request={self.request_id}")
        if self.backend not in BACKENDS:
            raise PreconditionError(f"Unknown generation backend={self.backend}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "source_id": self.source_id,
            "biased": self.biased,
            "context": self.context,
            "mode": self.mode,
            "replacement": self.replacement,
            "backend": self.backend,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> EditRequest:
        return cls(
            request_id=str(raw["request_id"]),
            source_id=str(raw["source_id"]),
            biased=str(raw["biased"]),
            context=str(raw["context"]),
            mode=str(raw["mode"]),
            replacement=None if raw.get("replacement") is None else str(raw["replacement"]),
            backend=str(raw["backend"]),
            seed=int(raw["seed"]),
        )


@dataclass(eq=False)
class GenerationRecord:
    request: EditRequest
    prompt: PromptSpec | None
    pixels: np.ndarray | None
    annotator_labels: frozenset[str] | None = None
    verdict: str = "pending"
    status: str = "ok"
    failure_reason: str | None = None
    # Ground-truth labels, known only for the grammar oracle.
    scene_labels: frozenset[str] | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok" and self.pixels is not None

    def set_verdict(self, verdict: str) -> None:
        if verdict not in {"accepted", "rejected"}:
            raise PreconditionError(f"Unknown verdict={verdict}")
        if self.verdict != "pending":
            raise PreconditionError(f"Verdict already set request={self.request.request_id} verdict={self.verdict}")
        self.verdict = verdict

    def to_dict(self) -> dict[str, Any]:
        return {
            "request": self.request.to_dict(),
            "prompt": self.prompt.text if self.prompt is not None else None,
            "status": self.status,
            "failure_reason": self.failure_reason,
            "annotator_labels": None if self.annotator_labels is None else sorted(self.annotator_labels),
            "verdict": self.verdict,
            "scene_labels": None if self.scene_labels is None else sorted(self.scene_labels),
        }


def build_prompts(
    sample_: ImageSample,
    schema: CategorySchema,
    pair: BiasPair,
    *,
    backend: str,
    seed: int,
    single_object: bool = False,
) -> list[EditRequest]:
    """One removal request plus one replacement per entry of ``replacement_lists[c]``.

    Single-object scenes cannot lose their background, so they only get replacements.
    """
    b, c = pair.biased, pair.context
    if b not in sample_.labels or c not in sample_.labels:
        raise PreconditionError(f"Source image lacks the pair id={sample_.id} biased={b} context={c}")
    replacements = tuple(schema.replacement_lists.get(c, ()))
    if not replacements:
        LOGGER.warning("Empty replacement list, removal only context=%s source=%s", c, sample_.id)

    edits: list[tuple[str, str | None]] = [] if single_object else [("removal", None)]
    edits.extend(("replacement", r) for r in replacements)
    if not edits:
        raise PreconditionError(f"No edits possible for single-object source id={sample_.id} context={c}")
    return [
        EditRequest(
            request_id=f"{sample_.id}-{index:02d}-{backend}",
            source_id=sample_.id,
            biased=b,
            context=c,
            mode=mode,
            replacement=replacement,
            backend=backend,
            seed=derive_seed(seed, "request", sample_.id, index),
        )
        for index, (mode, replacement) in enumerate(edits)
    ]


def pick_sources(image_ids: Sequence[str], cap: int | None, *, seed: int, pair: BiasPair) -> list[str]:
    """Deterministic subset of at most ``cap`` source ids, in sorted order."""
    ordered = sorted(image_ids)
    if cap is None or cap >= len(ordered):
        return ordered
    rng = numpy_rng(seed, "sources", pair.biased, pair.context)
    chosen = rng.choice(len(ordered), size=cap, replace=False)
    return sorted(ordered[i] for i in chosen)

