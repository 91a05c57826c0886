from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch

from context_debias.bias_audit import BiasPair
from context_debias.denoiser import DenoiserShape, build_model
from context_debias.diffusion import DiffusionBundle, NoiseSchedule
from context_debias.edit_requests import EditRequest, build_prompts, pick_sources
from context_debias.errors import PreconditionError, TokenResolutionError
from context_debias.generation_io import read_generations, write_generations
from context_debias.genmanip import GenerationResources, realize_prompt, run_generation
from context_debias.glyphs import Pose
from context_debias.personalize import PersonalizationConfig, fit_tokens
from context_debias.personalize_archive import save_result
from context_debias.scenegen import ImageSample, SceneSpec, render_scene
from context_debias.schema import default_schema
from context_debias.token_regions import CLASS_TOKEN, build_assignment
from context_debias.tokens import TEMPLATE_WORDS, LearnedToken, TokenTable

TINY = DenoiserShape(channels=8, embed_dim=8, time_dim=8, groups=2, timesteps=10)
PAIR = BiasPair("handbag", "person", 2.0)


def _source(index: int) -> ImageSample:
    spec = SceneSpec(
        biased_object="handbag",
        context_object="person",
        background="snow",
        object_poses=(("person", Pose(10.0, 18.0, 12.0)), ("handbag", Pose(22.0, 20.0, 10.0))),
        seed=100 + index,
    )
    return dataclasses.replace(render_scene(spec, default_schema()), id=f"s{index}", split="train")


def _bundle() -> DiffusionBundle:
    words = [*TEMPLATE_WORDS, "handbag", "person", "dog", "snow"]
    base = torch.randn(len(words), TINY.embed_dim, generator=torch.Generator().manual_seed(0))
    return DiffusionBundle(build_model(TINY, seed=0), TokenTable(words, base), NoiseSchedule.linear(TINY.timesteps))


def test_build_prompts_fans_out_removal_and_replacements() -> None:
    requests = build_prompts(_source(0), default_schema(), PAIR, backend="grammar_oracle", seed=3)
    assert [(r.mode, r.replacement) for r in requests] == [("removal", None), ("replacement", "dog")]
    assert len({r.seed for r in requests}) == len(requests)
    again = build_prompts(_source(0), default_schema(), PAIR, backend="grammar_oracle", seed=3)
    assert [r.seed for r in again] == [r.seed for r in requests]


def test_build_prompts_requires_the_pair_in_the_source() -> None:
    lone = dataclasses.replace(_source(0), labels=frozenset({"handbag", "snow"}))
    with pytest.raises(PreconditionError, match="lacks the pair"):
        build_prompts(lone, default_schema(), PAIR, backend="grammar_oracle", seed=0)


def test_single_object_prompts_only_replace_the_background() -> None:
    schema = default_schema("single_label")
    spec = SceneSpec("handbag", None, "grass", (("handbag", Pose(16.0, 16.0, 12.0)),), seed=5)
    source = dataclasses.replace(render_scene(spec, schema), id="g0")
    requests = build_prompts(source, schema, BiasPair("handbag", "grass", 2.0), backend="personalized", seed=0, single_object=True)
    assert [r.replacement for r in requests] == ["sand", "snow", "road"]
    assert all(r.mode == "replacement" for r in requests)

    prompt = realize_prompt(requests[0], [LearnedToken(20, CLASS_TOKEN)], single_object=True)
    assert prompt.text == "a photo of [Vclass] in sand"


def test_literal_prompts_per_backend() -> None:
    request = EditRequest("s0-01-base_txt2img", "s0", "handbag", "person", "replacement", "dog", "base_txt2img", 1)
    assert realize_prompt(request).text == "a photo of handbag and dog"
    removal = dataclasses.replace(request, mode="removal", replacement=None)
    assert realize_prompt(removal).text == "a photo of handbag"
    personalized = dataclasses.replace(request, backend="personalized")
    with pytest.raises(TokenResolutionError):
        realize_prompt(personalized)


def test_edit_request_validation() -> None:
    with pytest.raises(PreconditionError, match="replacement is required"):
        EditRequest("x", "s0", "handbag", "person", "replacement", None, "grammar_oracle", 0)
    with pytest.raises(PreconditionError, match="Unknown generation backend"):
        EditRequest("x", "s0", "handbag", "person", "removal", None, "dalle", 0)


def test_oracle_generation_carries_scene_labels(tmp_path: Path) -> None:
    sources = {f"s{k}": _source(k) for k in range(2)}
    requests = [r for s in sources.values() for r in build_prompts(s, default_schema(), PAIR, backend="grammar_oracle", seed=0)]
    records = run_generation(requests, GenerationResources(default_schema(), sources), workers=2)
    assert [r.request.request_id for r in records] == [r.request_id for r in requests]
    assert all(r.ok for r in records)
    labels = {r.request.mode: r.scene_labels for r in records if r.request.source_id == "s0"}
    assert labels["removal"] == frozenset({"handbag", "snow"})
    assert labels["replacement"] == frozenset({"handbag", "dog", "snow"})

    write_generations(records, tmp_path / "gen")
    written = sorted(p.name for p in (tmp_path / "gen").iterdir())
    assert written == sorted([*(f"{r.request.request_id}.png" for r in records), "manifest.jsonl"])
    loaded = read_generations(tmp_path / "gen")
    assert [r.request for r in loaded] == sorted((r.request for r in records), key=lambda q: q.request_id)
    assert all(r.pixels is not None and r.pixels.shape == (32, 32, 3) for r in loaded)
    assert loaded[0].prompt is not None and loaded[0].prompt.text.startswith("a photo of handbag")


def test_corrupted_personalization_archive_fails_only_its_requests(tmp_path: Path) -> None:
    bundle = _bundle()
    sources = {f"s{k}": _source(k) for k in range(3)}
    for source_id, source in sources.items():
        assignment = build_assignment(source, biased="handbag", context="person")
        result = fit_tokens(source, assignment, PersonalizationConfig(iters_phase1=0, iters_phase2=0, loss_batch_size=1), bundle)
        save_result(result, tmp_path / source_id)
    (tmp_path / "s1" / "result.pt").write_bytes(b"corrupted")

    requests = [r for s in sources.values() for r in build_prompts(s, default_schema(), PAIR, backend="personalized", seed=0)]
    resources = GenerationResources(default_schema(), sources, base=bundle, personalization_dir=tmp_path, steps=2)
    records = run_generation(requests, resources)
    failed = [r for r in records if not r.ok]
    assert len(records) == 6
    assert {r.request.source_id for r in failed} == {"s1"}
    assert all("CheckpointFormatError" in (r.failure_reason or "") for r in failed)
    ok = next(r for r in records if r.ok and r.request.mode == "replacement")
    assert ok.prompt is not None and ok.prompt.text == "a photo of handbag and dog at [Vbackground]"


def test_pick_sources_caps_deterministically() -> None:
    ids = [f"i{k:02d}" for k in range(20)]
    chosen = pick_sources(ids, 5, seed=1, pair=PAIR)
    assert len(chosen) == 5 and chosen == sorted(chosen)
    assert chosen == pick_sources(list(reversed(ids)), 5, seed=1, pair=PAIR)
    assert pick_sources(ids, None, seed=1, pair=PAIR) == ids
    assert np.isin(chosen, ids).all()
