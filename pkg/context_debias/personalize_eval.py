"""Quality checks of a fitted personalization: attention placement and background fidelity."""

from __future__ import annotations

import numpy as np

from context_debias.diffusion import DiffusionBundle, sample
from context_debias.personalize import PersonalizationResult, apply_result
from context_debias.personalize_losses import downsample_mask
from context_debias.scenegen import ImageSample
from context_debias.token_regions import BACKGROUND_TOKEN, CONTEXT_TOKEN
from context_debias.tokens import LiteralWord, PromptSpec


def attention_iou(result: PersonalizationResult) -> dict[str, float]:
    """IoU between each token's mean-thresholded attention map and its downsampled mask."""
    scores: dict[str, float] = {}
    for name, attn in result.attention.items():
        grid = (attn.shape[-2], attn.shape[-1])
        target = downsample_mask(result.masks[name], grid).numpy() > 0.5
        predicted = attn > attn.mean()
        union = np.logical_or(predicted, target).sum()
        scores[name] = 1.0 if union == 0 else float(np.logical_and(predicted, target).sum() / union)
    return scores


def background_reconstruction(
    base: DiffusionBundle,
    result: PersonalizationResult,
    image: ImageSample,
    *,
    seed: int,
    steps: int,
) -> tuple[float, float]:
    """(personalized, untrained-token) MSE on the background region for "a photo of [Vbackground]"."""
    name = BACKGROUND_TOKEN if result.variant == "multi" else CONTEXT_TOKEN
    tok = result.token(name)
    region = result.masks[name]
    prompt = PromptSpec((LiteralWord("a"), LiteralWord("photo"), LiteralWord("of"), tok), template=f"a photo of {name}")
    size = image.pixels.shape[0]

    model, table = apply_result(base, result)
    tuned = sample(prompt, table, model, seed, steps, schedule=base.schedule, image_size=size)

    init_table = base.table.detached()
    init_word = result.init_words.get(name)
    init = init_table.word_vector(init_word) if init_word in init_table.words else init_table.base.mean(dim=0)
    init_table.learned[tok.token_id] = init.detach().clone()
    init_table.names[tok.token_id] = name
    untrained = sample(prompt, init_table, base.model, seed, steps, schedule=base.schedule, image_size=size)

    def _mse(img: np.ndarray) -> float:
        return float(np.mean((img[region] - image.pixels[region]) ** 2))

    return _mse(tuned), _mse(untrained)
