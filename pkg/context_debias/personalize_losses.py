from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from context_debias.denoiser import DenoiseOutput, Denoiser, denoise_predict
from context_debias.diffusion import NoiseSchedule, forward_noise
from context_debias.errors import DimensionError
from context_debias.token_regions import TokenAssignment
from context_debias.tokens import PromptSpec, TokenTable


def _spatial_mask(mask: np.ndarray | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    return m.to(like.dtype)


def maskrec_loss(
    eps: torch.Tensor, eps_hat: torch.Tensor, mask: np.ndarray | torch.Tensor
) -> tuple[torch.Tensor, bool]:
    """Masked mean of (eps - eps_hat)^2; returns (0, True) when the mask is empty."""
    if tuple(eps.shape) != tuple(eps_hat.shape):
        raise DimensionError(f"eps shape {tuple(eps.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    m = _spatial_mask(mask, eps)
    if tuple(m.shape) != tuple(eps.shape[-2:]):
        raise DimensionError(f"Mask shape {tuple(m.shape)} does not match spatial shape {tuple(eps.shape[-2:])}")
    weight = m.expand_as(eps)
    count = weight.sum()
    if float(count) == 0.0:
        return (eps - eps_hat).sum() * 0.0, True
    return ((eps - eps_hat) ** 2 * weight).sum() / count, False


def downsample_mask(mask: np.ndarray | torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Area-average ``mask`` onto ``grid`` and threshold at 0.5."""
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask).to(torch.float64)
    h, w = int(m.shape[-2]), int(m.shape[-1])
    gh, gw = grid
    if (h, w) == (gh, gw):
        return m
    if h % gh or w % gw:
        raise DimensionError(f"Mask {h}x{w} does not tile the attention grid {gh}x{gw}")
    pooled = F.avg_pool2d(m.reshape(1, 1, h, w), kernel_size=(h // gh, w // gw))
    return (pooled.reshape(gh, gw) >= 0.5).to(torch.float64)


def crossattn_loss(attn_map: torch.Tensor, mask: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Mean squared difference between one token's attention map and its resampled mask."""
    grid = (int(attn_map.shape[-2]), int(attn_map.shape[-1]))
    target = downsample_mask(mask, grid).to(attn_map.dtype)
    if tuple(target.shape) != grid:
        raise DimensionError(f"Resampled mask {tuple(target.shape)} does not match attention grid {grid}")
    return ((attn_map - target) ** 2).mean()


@dataclass(frozen=True, eq=False)
class ObjectiveTerms:
    maskrec: torch.Tensor
    crossattn: torch.Tensor
    total: torch.Tensor

    def as_row(self) -> tuple[float, float, float]:
        return (float(self.maskrec.detach()), float(self.crossattn.detach()), float(self.total.detach()))


def objective(
    eps: torch.Tensor,
    out: DenoiseOutput,
    assignment: TokenAssignment,
    prompt: PromptSpec,
    *,
    lam: float,
    use_crossattn: bool = True,
) -> ObjectiveTerms:
    maskrec, _ = maskrec_loss(eps, out.eps_hat, assignment.union)
    crossattn = out.eps_hat.sum() * 0.0
    if use_crossattn:
        for region in assignment.regions:
            crossattn = crossattn + crossattn_loss(out.map_for(prompt.position_of(region.name)), region.mask)
    total = maskrec + lam * crossattn if use_crossattn else maskrec
    return ObjectiveTerms(maskrec, crossattn, total)


def personalization_loss(
    model: Denoiser,
    table: TokenTable,
    prompt: PromptSpec,
    assignment: TokenAssignment,
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    *,
    lam: float,
    use_crossattn: bool = True,
) -> ObjectiveTerms:
    """Combined objective maskrec + lam * crossattn for a batch of (t, eps) draws of ``x0``."""
    batch = x0.expand(eps.shape[0], -1, -1, -1)
    z = forward_noise(batch, t, eps, schedule)
    out = denoise_predict(z, t, prompt, table, model)
    return objective(eps, out, assignment, prompt, lam=lam, use_crossattn=use_crossattn)
