from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from context_debias.denoiser import DenoiserShape, build_model, denoise_predict
from context_debias.diffusion import DiffusionBundle, NoiseSchedule, forward_noise
from context_debias.errors import DimensionError, PreconditionError
from context_debias.personalize import PersonalizationConfig, apply_result, fit_tokens
from context_debias.personalize_archive import load_result, save_result
from context_debias.personalize_eval import attention_iou
from context_debias.personalize_losses import crossattn_loss, downsample_mask, maskrec_loss, objective, personalization_loss
from context_debias.scenegen import ImageSample
from context_debias.token_regions import BACKGROUND_TOKEN, CLASS_TOKEN, CONTEXT_TOKEN, build_assignment, personalization_prompt
from context_debias.tokens import TEMPLATE_WORDS, TokenTable

TINY = DenoiserShape(channels=8, embed_dim=8, time_dim=8, groups=2, timesteps=10)


def _bundle() -> DiffusionBundle:
    words = [*TEMPLATE_WORDS, "handbag", "person", "dog", "snow", "sand"]
    base = torch.randn(len(words), TINY.embed_dim, generator=torch.Generator().manual_seed(0))
    return DiffusionBundle(build_model(TINY, seed=0), TokenTable(words, base), NoiseSchedule.linear(TINY.timesteps))


def _image(person_area: int = 16) -> ImageSample:
    obj = np.zeros((8, 8), dtype=bool)
    obj[:4, :4] = True
    ctx = np.zeros((8, 8), dtype=bool)
    ctx[:4, 4 : 4 + person_area // 4] = True
    pixels = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    masks = {"handbag": obj, "person": ctx, "snow": ~(obj | ctx)}
    return ImageSample("img0", pixels, masks, frozenset(masks), ("handbag", "person"), "train")


def _config(**overrides: object) -> PersonalizationConfig:
    base: dict[str, object] = {"iters_phase1": 0, "iters_phase2": 0, "loss_batch_size": 2, "seed": 1}
    base.update(overrides)
    return PersonalizationConfig(**base)  # type: ignore[arg-type]


def test_maskrec_loss_averages_inside_the_mask() -> None:
    eps = torch.ones(1, 3, 4, 4)
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2] = True
    loss, empty = maskrec_loss(eps, torch.zeros_like(eps), mask)
    assert float(loss) == pytest.approx(1.0)
    assert not empty

    zero, empty = maskrec_loss(eps, torch.zeros_like(eps), np.zeros((4, 4), dtype=bool))
    assert float(zero) == 0.0 and empty
    with pytest.raises(DimensionError):
        maskrec_loss(eps, torch.zeros_like(eps), np.ones((2, 2), dtype=bool))


def test_crossattn_loss_against_downsampled_mask() -> None:
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2, :2] = True
    assert downsample_mask(mask, (2, 2)).tolist() == [[1.0, 0.0], [0.0, 0.0]]
    attn = torch.full((2, 2), 0.25, dtype=torch.float64)
    assert float(crossattn_loss(attn, mask)) == pytest.approx(0.1875)
    with pytest.raises(DimensionError):
        downsample_mask(np.ones((5, 5), dtype=bool), (2, 2))


def test_assignment_regions_partition_the_image() -> None:
    assignment = build_assignment(_image(), biased="handbag", context="person", background="snow")
    assert assignment.names == ("[Vhandbag]", "[Vperson]", BACKGROUND_TOKEN)
    assert assignment.union.all()
    single = build_assignment(_image(), biased="handbag", variant="single", background="snow")
    assert single.names == (CLASS_TOKEN, CONTEXT_TOKEN)


def test_degenerate_region_is_dropped() -> None:
    assignment = build_assignment(_image(person_area=0), biased="handbag", context="person", background="snow")
    assert "[Vperson]" not in assignment.names


def test_assignment_needs_the_object_mask() -> None:
    with pytest.raises(PreconditionError, match="no mask for the object"):
        build_assignment(_image(), biased="skis", context="person")


def test_zero_lambda_equals_dropping_the_attention_term() -> None:
    bundle = _bundle()
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    table = bundle.table.detached()
    tokens = [table.add_token(r.name, table.base.mean(dim=0)) for r in assignment.regions]
    prompt = personalization_prompt(tokens)
    x0 = torch.as_tensor(image.pixels).permute(2, 0, 1)[None] * 2 - 1
    t = torch.tensor([3, 7])
    eps = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(5))
    args = (bundle.model, table, prompt, assignment, x0, t, eps, bundle.schedule)
    with_zero = personalization_loss(*args, lam=0.0, use_crossattn=True)
    without = personalization_loss(*args, lam=0.0, use_crossattn=False)
    assert float(with_zero.total) == pytest.approx(float(without.total))
    assert float(with_zero.crossattn) > 0.0


def test_zero_iterations_leave_everything_unchanged() -> None:
    bundle = _bundle()
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    result = fit_tokens(image, assignment, _config(), bundle)
    assert result.trace == []
    assert all(float(d.abs().max()) == 0.0 for d in result.model_delta.values())
    tok = result.token("[Vperson]")
    assert torch.equal(result.embeddings[tok.token_id], bundle.table.word_vector("person"))
    assert result.initial_loss == pytest.approx(result.final_loss)


def test_phases_update_tokens_then_model() -> None:
    bundle = _bundle()
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    tokens_only = fit_tokens(image, assignment, _config(iters_phase1=2, token_lr=0.01), bundle)
    assert len(tokens_only.trace) == 2
    assert all(float(d.abs().max()) == 0.0 for d in tokens_only.model_delta.values())
    tok = tokens_only.token("[Vhandbag]")
    assert not torch.equal(tokens_only.embeddings[tok.token_id], bundle.table.word_vector("handbag"))

    joint = fit_tokens(image, assignment, _config(iters_phase1=1, iters_phase2=1, model_lr=1e-3), bundle)
    assert len(joint.trace) == 2
    assert any(float(d.abs().max()) > 0.0 for d in joint.model_delta.values())


def test_result_archive_round_trip(tmp_path: Path) -> None:
    bundle = _bundle()
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    result = fit_tokens(image, assignment, _config(iters_phase1=1), bundle)
    save_result(result, tmp_path / "img0")
    loaded = load_result(tmp_path / "img0")
    assert loaded.tokens == result.tokens
    assert loaded.seed == result.seed == 1
    assert all(torch.equal(loaded.embeddings[k], v) for k, v in result.embeddings.items())
    assert (tmp_path / "img0" / "trace.csv").read_text(encoding="utf-8").startswith("iteration,maskrec,crossattn,total")
    assert set(attention_iou(loaded)) == set(assignment.names)


def test_applied_result_keeps_base_outputs_without_model_updates() -> None:
    bundle = _bundle()
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    result = fit_tokens(image, assignment, _config(), bundle)
    model, table = apply_result(bundle, result)
    prompt = personalization_prompt(result.tokens)
    z = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(2))
    bundle.model.eval()
    tuned_table = bundle.table.detached()
    for tok in result.tokens:
        tuned_table.learned[tok.token_id] = result.embeddings[tok.token_id]
        tuned_table.names[tok.token_id] = tok.name
    expected = denoise_predict(z, 3, prompt, tuned_table, bundle.model).eps_hat
    assert torch.allclose(denoise_predict(z, 3, prompt, table, model).eps_hat, expected)


def test_low_rank_adaptation_stores_only_adapters() -> None:
    bundle = _bundle()
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    result = fit_tokens(image, assignment, _config(iters_phase2=1, lora_rank=2, model_lr=1e-3), bundle)
    assert result.model_delta
    assert all(".lora_" in key for key in result.model_delta)
    model, _ = apply_result(bundle, result)
    assert model.attn.lora_rank == 2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objective_gradient_matches_finite_differences(seed: int) -> None:
    model = build_model(TINY, seed=seed).double()
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    words = [*TEMPLATE_WORDS, "handbag", "person", "snow"]
    table = TokenTable(words, torch.randn(len(words), TINY.embed_dim, generator=gen, dtype=torch.float64))
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    tokens = [table.add_token(r.name, table.word_vector(r.init_word or "a")) for r in assignment.regions]
    prompt = personalization_prompt(tokens)
    x0 = torch.as_tensor(image.pixels, dtype=torch.float64).permute(2, 0, 1)[None] * 2 - 1
    t = torch.randint(0, TINY.timesteps, (2,), generator=gen)
    eps = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    z = forward_noise(x0.expand(2, -1, -1, -1), t, eps, NoiseSchedule.linear(TINY.timesteps))

    def total(*vectors: torch.Tensor) -> torch.Tensor:
        for tok, vector in zip(tokens, vectors, strict=True):
            table.learned[tok.token_id] = vector
        out = denoise_predict(z, t, prompt, table, model)
        return objective(eps, out, assignment, prompt, lam=0.5).total

    inputs = tuple(table.learned[tok.token_id].detach().clone().requires_grad_(True) for tok in tokens)
    assert torch.autograd.gradcheck(total, inputs, eps=1e-6, atol=1e-5)


@pytest.mark.parametrize("lora_rank", [0, 2])
def test_fit_tokens_is_bit_identical_across_runs(lora_rank: int) -> None:
    bundle = _bundle()
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    config = _config(iters_phase1=3, iters_phase2=2, token_lr=0.01, model_lr=1e-3, lora_rank=lora_rank)
    first = fit_tokens(image, assignment, config, bundle)
    second = fit_tokens(image, assignment, config, bundle)
    assert first.trace == second.trace
    assert first.final_loss == second.final_loss
    assert all(torch.equal(first.embeddings[k], second.embeddings[k]) for k in first.embeddings)
    assert first.model_delta.keys() == second.model_delta.keys()
    assert all(torch.equal(first.model_delta[k], second.model_delta[k]) for k in first.model_delta)


def test_applying_low_rank_result_leaves_global_rng_untouched() -> None:
    bundle = _bundle()
    image = _image()
    assignment = build_assignment(image, biased="handbag", context="person", background="snow")
    result = fit_tokens(image, assignment, _config(iters_phase2=1, lora_rank=2, model_lr=1e-3), bundle)
    torch.manual_seed(123)
    expected = torch.rand(4)
    torch.manual_seed(123)
    first, _ = apply_result(bundle, result)
    assert torch.equal(torch.rand(4), expected)
    second, _ = apply_result(bundle, result)
    pairs = zip(first.state_dict().values(), second.state_dict().values(), strict=True)
    assert all(torch.equal(a, b) for a, b in pairs)
