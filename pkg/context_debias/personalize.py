from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from context_debias.denoiser import Denoiser, denoise_predict
from context_debias.diffusion import DiffusionBundle, NoiseSchedule, forward_noise, to_model_space
from context_debias.errors import CheckpointFormatError, ConfigError, TokenResolutionError, TrainingFailure
from context_debias.personalize_losses import ObjectiveTerms, objective, personalization_loss
from context_debias.scenegen import ImageSample
from context_debias.seeding import torch_generator
from context_debias.token_regions import TokenAssignment, personalization_prompt
from context_debias.tokens import LearnedToken, TokenTable

LOGGER = logging.getLogger("context-debias")


@dataclass(frozen=True)
class PersonalizationConfig:
    lam: float = 0.01
    token_lr: float = 1e-4
    model_lr: float = 1e-6
    iters_phase1: int = 300
    iters_phase2: int = 300
    seed: int = 0
    t_min: int = 0
    t_max: int | None = None
    lora_rank: int = 0
    use_crossattn: bool = True
    loss_batch_size: int = 8
    min_mask_area: int = 4

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.token_lr <= 0 or self.model_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.iters_phase1 < 0 or self.iters_phase2 < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.t_min < 0 or (self.t_max is not None and self.t_max <= self.t_min):
            raise ConfigError("timestep range must be non-empty")
        if self.loss_batch_size < 1 or self.lora_rank < 0:
            raise ConfigError("loss_batch_size must be positive and lora_rank non-negative")


@dataclass(eq=False)
class PersonalizationResult:
    source_id: str
    variant: str
    tokens: tuple[LearnedToken, ...]
    init_words: dict[str, str | None]
    embeddings: dict[int, torch.Tensor]
    model_delta: dict[str, torch.Tensor]
    low_rank: int
    trace: list[tuple[float, float, float]]
    initial_loss: float
    final_loss: float
    attention: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    def token(self, name: str) -> LearnedToken:
        for tok in self.tokens:
            if tok.name == name:
                return tok
        raise TokenResolutionError(f"Personalization has no token name={name} source={self.source_id}")


def _loss_batch(
    cfg: PersonalizationConfig, schedule: NoiseSchedule, x0: torch.Tensor, source_id: str
) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch_generator(cfg.seed, "loss-batch", source_id)
    hi = cfg.t_max if cfg.t_max is not None else schedule.T
    t = torch.randint(cfg.t_min, min(hi, schedule.T), (cfg.loss_batch_size,), generator=gen)
    eps = torch.randn((cfg.loss_batch_size, *x0.shape[1:]), generator=gen, dtype=x0.dtype)
    return t, eps


def fit_tokens(
    image: ImageSample,
    assignment: TokenAssignment,
    config: PersonalizationConfig,
    base: DiffusionBundle,
) -> PersonalizationResult:
    """Learn one token per region, then jointly adapt tokens and denoiser, on a single image.

    Phase 1 updates only the learned embeddings at ``token_lr``; phase 2 adds the denoiser (or
    its low-rank cross-attention adapters) at ``model_lr``.
    """
    config.validate()
    schedule = base.schedule
    hi = min(config.t_max if config.t_max is not None else schedule.T, schedule.T)
    if config.t_min >= hi:
        raise ConfigError(f"Timestep range empty for T={schedule.T}")

    model = copy.deepcopy(base.model)
    model.eval()
    if config.lora_rank:
        model.attn.enable_lora(config.lora_rank, torch_generator(config.seed, "lora", image.id))
    for p in model.parameters():
        p.requires_grad_(False)
    start_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    table = base.table.detached()
    tokens: list[LearnedToken] = []
    for region in assignment.regions:
        if region.init_word is not None and region.init_word in table.words:
            init = table.word_vector(region.init_word)
        else:
            init = table.base.mean(dim=0)
        tokens.append(table.add_token(region.name, init))
    learned = [table.learned[tok.token_id] for tok in tokens]
    prompt = personalization_prompt(tokens)

    x0 = to_model_space(image.pixels)[None].to(next(model.parameters()).dtype)
    batch_t, batch_eps = _loss_batch(config, schedule, x0, image.id)

    def _loss(t: torch.Tensor, eps: torch.Tensor) -> ObjectiveTerms:
        return personalization_loss(
            model, table, prompt, assignment, x0, t, eps, schedule,
            lam=config.lam, use_crossattn=config.use_crossattn,
        )

    with torch.no_grad():
        initial_loss = float(_loss(batch_t, batch_eps).total)

    gen = torch_generator(config.seed, "personalize", image.id)
    trace: list[tuple[float, float, float]] = []

    def _run(opt: torch.optim.Optimizer, iters: int, phase: int) -> None:
        for i in range(iters):
            t = torch.randint(config.t_min, hi, (1,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            terms = _loss(t, eps)
            if not torch.isfinite(terms.total):
                trace.append(terms.as_row())
                raise TrainingFailure(
                    f"Personalization loss became non-finite source={image.id} phase={phase} iter={i}", trace
                )
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            opt.step()
            trace.append(terms.as_row())

    if config.iters_phase1:
        _run(torch.optim.Adam(learned, lr=config.token_lr), config.iters_phase1, 1)
    if config.iters_phase2:
        adapted = _adapted_parameters(model, config.lora_rank)
        for p in adapted:
            p.requires_grad_(True)
        opt = torch.optim.Adam([{"params": learned, "lr": config.token_lr}, {"params": adapted, "lr": config.model_lr}])
        _run(opt, config.iters_phase2, 2)
        for p in adapted:
            p.requires_grad_(False)

    with torch.no_grad():
        z = forward_noise(x0.expand(batch_eps.shape[0], -1, -1, -1), batch_t, batch_eps, schedule)
        out = denoise_predict(z, batch_t, prompt, table, model)
        final_terms = objective(batch_eps, out, assignment, prompt, lam=config.lam, use_crossattn=config.use_crossattn)
        attention = {
            name: out.map_for(prompt.position_of(name)).mean(dim=0).cpu().numpy().astype(np.float64)
            for name in assignment.names
        }

    end_state = model.state_dict()
    if config.lora_rank:
        delta = {k: v.detach().clone() for k, v in end_state.items() if ".lora_" in k}
    else:
        delta = {
            k: (end_state[k] - start_state[k]).detach().clone() for k in end_state if end_state[k].is_floating_point()
        }
    result = PersonalizationResult(
        source_id=image.id,
        variant=assignment.variant,
        tokens=tuple(tokens),
        init_words={r.name: r.init_word for r in assignment.regions},
        embeddings={tok.token_id: table.learned[tok.token_id].detach().clone() for tok in tokens},
        model_delta=delta,
        low_rank=config.lora_rank,
        trace=trace,
        initial_loss=initial_loss,
        final_loss=float(final_terms.total),
        attention=attention,
        masks={r.name: r.mask.copy() for r in assignment.regions},
        seed=config.seed,
    )
    LOGGER.info(
        "Personalized image source=%s tokens=%s initial_loss=%.5f final_loss=%.5f",
        image.id,
        ",".join(assignment.names),
        result.initial_loss,
        result.final_loss,
    )
    return result


def _adapted_parameters(model: Denoiser, lora_rank: int) -> list[torch.nn.Parameter]:
    if lora_rank:
        return [p for name, p in model.named_parameters() if ".lora_" in name]
    return list(model.parameters())


def apply_result(base: DiffusionBundle, result: PersonalizationResult) -> tuple[Denoiser, TokenTable]:
    """Base model plus the stored delta, and a token table with the learned embeddings."""
    model = copy.deepcopy(base.model)
    if result.low_rank:
        model.attn.enable_lora(result.low_rank, torch_generator(result.seed, "lora", result.source_id))
    state = model.state_dict()
    for key, value in result.model_delta.items():
        if key not in state:
            raise CheckpointFormatError(
                f"Personalization delta has unknown parameter key={key} source={result.source_id}"
            )
        state[key] = value.clone() if result.low_rank else state[key] + value
    model.load_state_dict(state)
    model.eval()
    table = base.table.detached()
    for tok in result.tokens:
        table.learned[tok.token_id] = result.embeddings[tok.token_id].detach().clone()
        table.names[tok.token_id] = tok.name
    return model, table

