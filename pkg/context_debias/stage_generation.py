"""Stage runners from base diffusion training through verification of the generated edits."""

from __future__ import annotations

import functools
import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from context_debias.bias_audit import BiasPair
from context_debias.denoiser import DenoiserShape
from context_debias.diffusion import DiffusionBundle, load_checkpoint, save_checkpoint
from context_debias.diffusion_training import BaseTrainingConfig, caption_words, train_base_model
from context_debias.edit_requests import build_prompts
from context_debias.errors import ContextDebiasError, ProvenanceError
from context_debias.generation_io import read_generations, write_generations
from context_debias.genmanip import GenerationResources, run_generation
from context_debias.personalize import PersonalizationConfig, fit_tokens
from context_debias.personalize_archive import save_result
from context_debias.personalize_eval import attention_iou
from context_debias.scenegen import ImageSample
from context_debias.seeding import derive_seed, numpy_rng
from context_debias.selection import SelectionPolicy, select, write_selection
from context_debias.stage_context import (
    StageContext,
    generated_methods,
    load_run_dataset,
    load_run_pairs,
    selection_stats,
    skip_stage,
    sources_for,
    write_json,
    write_loss,
)
from context_debias.token_regions import build_assignment
from context_debias.verify import annotate_records, load_annotator, write_annotations
from context_debias.workers import run_bounded_sync

LOGGER = logging.getLogger("context-debias")


def training_captions(ctx: StageContext, train: Sequence[ImageSample]) -> list[list[list[str]]]:
    """Caption options per training image, drawn from its stored scene."""
    d = ctx.config.diffusion
    rng = numpy_rng(ctx.seed, "caption-plan")
    out: list[list[list[str]]] = []
    for s in train:
        scene = s.scene
        if scene is None:
            raise ProvenanceError(f"Training image has no stored scene id={s.id}")
        contexts = [c for c in (scene.context_object, scene.secondary_context) if c is not None]
        out.append(
            [
                caption_words(
                    rng,
                    obj=scene.biased_object,
                    contexts=contexts,
                    background=scene.background,
                    single_object=ctx.single_object,
                    drop=d.caption_drop,
                )
                for _ in range(d.captions_per_image)
            ]
        )
    return out


def run_train_diffusion(ctx: StageContext, out: Path) -> None:
    if not any(b != "grammar_oracle" for b in ctx.config.backends()):
        skip_stage(out, "no diffusion backend configured")
        return
    d = ctx.config.diffusion
    dataset = load_run_dataset(ctx)
    train = dataset.split("train")
    captions = training_captions(ctx, train)
    with open(out / "captions.jsonl", "w", encoding="utf-8") as f:
        for s, options in zip(train, captions, strict=True):
            f.write(json.dumps({"id": s.id, "captions": [" ".join(c) for c in options]}, sort_keys=True) + "\n")
    config = BaseTrainingConfig(
        shape=DenoiserShape(
            channels=d.channels, embed_dim=d.embed_dim, time_dim=d.time_dim, groups=d.groups, timesteps=d.timesteps
        ),
        beta_start=d.beta_start,
        beta_end=d.beta_end,
        epochs=d.epochs,
        batch_size=d.batch_size,
        lr=d.lr,
        caption_drop=d.caption_drop,
        seed=ctx.seed,
    )
    bundle = train_base_model(np.stack([s.pixels for s in train]), captions, dataset.schema.categories, config)
    save_checkpoint(out / "diffusion.pt", bundle)
    write_loss(out / "loss.csv", bundle.loss_trace)


def _personalize_one(
    ctx: StageContext,
    sample_: ImageSample,
    pair: BiasPair,
    config: PersonalizationConfig,
    base: DiffusionBundle,
    out: Path,
) -> dict[str, Any]:
    try:
        assignment = build_assignment(
            sample_,
            biased=pair.biased,
            context=None if ctx.single_object else pair.context,
            variant="single" if ctx.single_object else "multi",
            min_area=config.min_mask_area,
        )
        result = fit_tokens(sample_, assignment, config, base)
        save_result(result, out / sample_.id)
    except ContextDebiasError as exc:
        LOGGER.exception("Personalization failed source=%s", sample_.id)
        return {"source_id": sample_.id, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    initial, final = result.initial_loss, result.final_loss
    return {
        "source_id": sample_.id,
        "status": "ok",
        "tokens": [t.name for t in result.tokens],
        "initial_loss": initial,
        "final_loss": final,
        "reduction": (1.0 - final / initial) if initial > 0 else None,
        "attention_iou": attention_iou(result),
    }


def run_personalize(ctx: StageContext, out: Path) -> None:
    if "personalized" not in ctx.config.backends():
        skip_stage(out, "personalized backend not configured")
        return
    p = ctx.config.personalization
    config = PersonalizationConfig(
        lam=p.lam,
        token_lr=p.token_lr,
        model_lr=p.model_lr,
        iters_phase1=p.iters_phase1,
        iters_phase2=p.iters_phase2,
        seed=ctx.seed,
        t_min=p.t_min,
        t_max=p.t_max,
        lora_rank=p.lora_rank,
        loss_batch_size=p.loss_batch_size,
        min_mask_area=p.min_mask_area,
    )
    config.validate()
    base = load_checkpoint(ctx.stage_dir("train-diffusion") / "diffusion.pt")
    train = load_run_dataset(ctx, with_masks=True).split("train")
    jobs: dict[str, tuple[ImageSample, BiasPair]] = {}
    for pair in load_run_pairs(ctx)[0]:
        for s in sources_for(ctx, train, pair, "personalized"):
            jobs.setdefault(s.id, (s, pair))
    results = run_bounded_sync(
        [
            functools.partial(_personalize_one, ctx, s, pair, config, base, out / "personalized")
            for s, pair in jobs.values()
        ],
        workers=ctx.workers,
    )
    failed = sum(1 for r in results if r["status"] != "ok")
    write_json(out / "summary.json", {"results": results, "ok": len(results) - failed, "failed": failed})
    LOGGER.info("Personalization complete sources=%s failed=%s", len(results), failed)


def run_generate(ctx: StageContext, out: Path) -> None:
    g = ctx.config.generation
    backends = ctx.config.backends()
    dataset = load_run_dataset(ctx)
    train = dataset.split("train")
    pairs, _ = load_run_pairs(ctx)
    requests = []
    sources: dict[str, ImageSample] = {}
    for backend in backends:
        for pair in pairs:
            for s in sources_for(ctx, train, pair, backend):
                sources[s.id] = s
                requests.extend(
                    build_prompts(
                        s, dataset.schema, pair, backend=backend, seed=ctx.seed, single_object=ctx.single_object
                    )
                )
    needs_base = any(b != "grammar_oracle" for b in backends)
    resources = GenerationResources(
        schema=dataset.schema,
        sources=sources,
        base=load_checkpoint(ctx.stage_dir("train-diffusion") / "diffusion.pt") if needs_base else None,
        personalization_dir=ctx.stage_dir("personalize") / "personalized" if "personalized" in backends else None,
        steps=g.steps,
        single_object=ctx.single_object,
        learned_object=g.learned_object,
    )
    records = run_generation(requests, resources, workers=ctx.workers)
    write_generations(records, out / "generations")
    summary = {
        backend: {
            "requests": sum(1 for r in records if r.request.backend == backend),
            "failed": sum(1 for r in records if r.request.backend == backend and not r.ok),
        }
        for backend in backends
    }
    write_json(out / "summary.json", summary)


def run_verify(ctx: StageContext, out: Path) -> None:
    annotator = load_annotator(ctx.stage_dir("train-annotator"))
    records = read_generations(ctx.stage_dir("generate") / "generations")
    annotate_records(records, annotator)
    write_annotations(records, out / "annotations.jsonl")

    train = load_run_dataset(ctx).split("train")
    pairs, _ = load_run_pairs(ctx)
    stats = selection_stats(train, pairs)
    for method in generated_methods(ctx.config):
        policy = SelectionPolicy(
            mode=method.selection.mode,
            scheme=method.selection.scheme,
            caps=dict(method.selection.caps),
            seed=derive_seed(ctx.seed, "select", method.name),
        )
        pool = [r for r in records if r.request.backend == method.backend]
        selected, report = select(pool, policy, stats)
        write_selection(out / f"selection_{method.name}.json", report, [s.id for s in train], selected)

    known = [r for r in records if r.scene_labels is not None and r.ok]
    agreement = sum(1 for r in known if r.annotator_labels == r.scene_labels) / len(known) if known else None
    summary = {
        "records": len(records),
        "accepted": sum(1 for r in records if r.verdict == "accepted"),
        "oracle_label_agreement": agreement,
    }
    write_json(out / "summary.json", summary)
