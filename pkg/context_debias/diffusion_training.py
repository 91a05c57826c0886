from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from context_debias.denoiser import DenoiserShape, build_model
from context_debias.diffusion import DiffusionBundle, NoiseSchedule, forward_noise, to_model_space
from context_debias.errors import DimensionError, TrainingFailure
from context_debias.seeding import derive_seed, numpy_rng, torch_generator
from context_debias.tokens import MAX_TOKENS, TEMPLATE_WORDS, TokenTable

LOGGER = logging.getLogger("context-debias")


def caption_words(
    rng: np.random.Generator,
    *,
    obj: str | None,
    contexts: Sequence[str],
    background: str,
    single_object: bool,
    drop: float,
) -> list[str]:
    """Literal-word training caption; optional parts are dropped with probability ``drop``."""
    words = ["a", "photo", "of"]
    if obj is not None:
        words.append(obj)
    if single_object:
        if obj is None or rng.random() >= drop:
            words.extend(["in", background])
        return words
    for ctx in contexts:
        if rng.random() >= drop:
            words.extend(["and", ctx] if len(words) > 3 else [ctx])
    if len(words) == 3 or rng.random() >= 0.5:
        words.extend(["at", background])
    return words


@dataclass(frozen=True)
class BaseTrainingConfig:
    shape: DenoiserShape = DenoiserShape()
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-4
    caption_drop: float = 0.3
    seed: int = 0


def train_base_model(
    images: np.ndarray,
    captions: Sequence[Sequence[Sequence[str]]],
    vocabulary: Sequence[str],
    config: BaseTrainingConfig,
) -> DiffusionBundle:
    """Train the denoiser and the base vocabulary jointly.

    ``images`` is N x H x W x 3 in [0,1]; ``captions[i]`` holds the candidate word lists of
    image i, one of which is drawn uniformly at each visit.
    """
    if len(images) != len(captions):
        raise DimensionError("One caption list per training image is required")
    schedule = NoiseSchedule.linear(config.shape.timesteps, config.beta_start, config.beta_end)
    model = build_model(config.shape, config.seed)
    words = list(dict.fromkeys([*TEMPLATE_WORDS, *vocabulary]))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "vocab-init"))
        base = nn.Parameter(torch.randn(len(words), config.shape.embed_dim) * 0.5)
    index = {w: i for i, w in enumerate(words)}

    x_all = to_model_space(images)
    gen = torch_generator(config.seed, "diffusion-train")
    rng = numpy_rng(config.seed, "captions")
    opt = torch.optim.Adam([*model.parameters(), base], lr=config.lr)
    trace: list[float] = []
    n = x_all.shape[0]
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x0 = x_all[idx]
            ids = torch.zeros((len(idx), MAX_TOKENS), dtype=torch.long)
            valid = torch.zeros((len(idx), MAX_TOKENS), dtype=torch.bool)
            for row, i in enumerate(idx.tolist()):
                options = captions[i]
                chosen = options[int(rng.integers(len(options)))]
                ids[row, : len(chosen)] = torch.tensor([index[w] for w in chosen])
                valid[row, : len(chosen)] = True
            t = torch.randint(0, schedule.T, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            z = forward_noise(x0, t, eps, schedule)
            eps_hat, _ = model(z, t, base[ids], valid)
            loss = F.mse_loss(eps_hat, eps)
            if not torch.isfinite(loss):
                raise TrainingFailure(f"Base diffusion loss became non-finite epoch={epoch}", trace)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            trace.append(float(loss.detach()))
        LOGGER.info("Diffusion epoch complete epoch=%s loss=%.5f", epoch, trace[-1] if trace else float("nan"))
    model.eval()
    return DiffusionBundle(model=model, table=TokenTable(words, base.detach()), schedule=schedule, loss_trace=trace)
