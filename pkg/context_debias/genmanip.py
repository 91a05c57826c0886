from __future__ import annotations

import functools
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

from context_debias.diffusion import DiffusionBundle, sample
from context_debias.edit_requests import EditRequest, GenerationRecord
from context_debias.errors import PreconditionError, SchemaError, TokenResolutionError
from context_debias.oracle import grammar_oracle_edit
from context_debias.personalize import apply_result
from context_debias.personalize_archive import load_result
from context_debias.scenegen import ImageSample
from context_debias.schema import CategorySchema
from context_debias.token_regions import BACKGROUND_TOKEN, CLASS_TOKEN
from context_debias.tokens import LearnedToken, LiteralWord, PromptSpec
from context_debias.workers import run_bounded_sync

LOGGER = logging.getLogger("context-debias")


def _find(tokens: Sequence[LearnedToken], name: str) -> LearnedToken:
    for tok in tokens:
        if tok.name == name:
            return tok
    raise TokenResolutionError(f"Required learned token missing name={name}")


def realize_prompt(
    request: EditRequest,
    tokens: Sequence[LearnedToken] | None = None,
    *,
    single_object: bool = False,
    learned_object: bool = False,
) -> PromptSpec:
    """Prompt for ``request`` on its backend.

    Personalized multi-object: "a photo of <b> [and <r>] at [Vbackground]"; single-object:
    "a photo of [Vclass] in <r>". Other backends use literal words only.
    """
    lead = [LiteralWord("a"), LiteralWord("photo"), LiteralWord("of")]
    r = request.replacement
    if request.backend != "personalized":
        words = [*lead, LiteralWord(request.biased)]
        if single_object:
            if r is not None:
                words += [LiteralWord("in"), LiteralWord(r)]
        elif r is not None:
            words += [LiteralWord("and"), LiteralWord(r)]
        template = f"a photo of <b>{' in <r>' if single_object and r else ' and <r>' if r else ''}"
        return PromptSpec(tuple(words), template=template)

    if tokens is None:
        raise TokenResolutionError(f"Personalized backend needs learned tokens request={request.request_id}")
    if single_object:
        cls_tok = _find(tokens, CLASS_TOKEN)
        if r is None:
            return PromptSpec((*lead, cls_tok), template=f"a photo of {CLASS_TOKEN}")
        return PromptSpec(
            (*lead, cls_tok, LiteralWord("in"), LiteralWord(r)), template=f"a photo of {CLASS_TOKEN} in <r>"
        )

    bg_tok = _find(tokens, BACKGROUND_TOKEN)
    obj = _find(tokens, f"[V{request.biased}]") if learned_object else LiteralWord(request.biased)
    words = [*lead, obj]
    if r is not None:
        words += [LiteralWord("and"), LiteralWord(r)]
    words += [LiteralWord("at"), bg_tok]
    template = f"a photo of <b>{' and <r>' if r else ''} at {BACKGROUND_TOKEN}"
    return PromptSpec(tuple(words), template=template)


@dataclass(frozen=True)
class GenerationResources:
    schema: CategorySchema
    sources: Mapping[str, ImageSample]
    base: DiffusionBundle | None = None
    personalization_dir: Path | None = None
    steps: int = 200
    single_object: bool = False
    learned_object: bool = False


def _generate_one(request: EditRequest, resources: GenerationResources) -> GenerationRecord:
    single = resources.single_object
    if request.backend == "grammar_oracle":
        source = resources.sources.get(request.source_id)
        if source is None:
            raise SchemaError(f"Unknown source image id={request.source_id}")
        edited = grammar_oracle_edit(
            source,
            request.mode,
            request.replacement,
            schema=resources.schema,
            context=request.context,
        )
        prompt = realize_prompt(request, single_object=single)
        return GenerationRecord(request, prompt, edited.pixels, scene_labels=edited.labels)

    base = resources.base
    if base is None:
        raise PreconditionError(f"Diffusion backend has no base model backend={request.backend}")
    size = next(iter(resources.sources.values())).pixels.shape[0] if resources.sources else 32
    if request.backend == "base_txt2img":
        prompt = realize_prompt(request, single_object=single)
        pixels = sample(
            prompt, base.table, base.model, request.seed, resources.steps, schedule=base.schedule, image_size=size
        )
        return GenerationRecord(request, prompt, pixels)

    if resources.personalization_dir is None:
        raise PreconditionError("Personalized backend needs a personalization directory")
    result = load_result(resources.personalization_dir / request.source_id)
    model, table = apply_result(base, result)
    prompt = realize_prompt(request, result.tokens, single_object=single, learned_object=resources.learned_object)
    pixels = sample(prompt, table, model, request.seed, resources.steps, schedule=base.schedule, image_size=size)
    return GenerationRecord(request, prompt, pixels)


def _guarded(request: EditRequest, resources: GenerationResources) -> GenerationRecord:
    try:
        return _generate_one(request, resources)
    except Exception as exc:
        LOGGER.exception("Generation failed request=%s backend=%s", request.request_id, request.backend)
        return GenerationRecord(
            request,
            None,
            None,
            status="failed",
            failure_reason=f"{type(exc).__name__}: {exc}",
        )


def run_generation(
    requests: Sequence[EditRequest],
    resources: GenerationResources,
    *,
    workers: int = 1,
) -> list[GenerationRecord]:
    """One pending record per request; a failing request never aborts the batch."""
    records = run_bounded_sync([functools.partial(_guarded, req, resources) for req in requests], workers=workers)
    failed = sum(1 for r in records if not r.ok)
    LOGGER.info("Generation batch complete requests=%s failed=%s", len(records), failed)
    return records

