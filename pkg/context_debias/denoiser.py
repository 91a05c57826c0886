from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from context_debias.errors import PreconditionError
from context_debias.seeding import derive_seed
from context_debias.tokens import MAX_TOKENS, PromptSpec, TokenTable


@dataclass(frozen=True)
class DenoiserShape:
    channels: int = 32
    embed_dim: int = 64
    time_dim: int = 64
    groups: int = 8
    timesteps: int = 200
    lora_rank: int = 0


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(min(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TextMixer(nn.Module):
    """Positional embedding plus one masked self-attention layer over the prompt tokens."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(MAX_TOKENS, dim))
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, tokens: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        x = tokens + self.pos[: tokens.shape[1]]
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        scores = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(~valid[:, None, :], float("-inf"))
        return x + self.out(torch.softmax(scores, dim=-1) @ v)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int, groups: int, lora_rank: int = 0) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.lora_rank = 0
        if lora_rank > 0:
            self.enable_lora(lora_rank)

    def enable_lora(self, rank: int, generator: torch.Generator | None = None) -> None:
        context_dim, channels = self.to_k.in_features, self.to_k.out_features
        scale = 1.0 / math.sqrt(context_dim)
        self.lora_rank = int(rank)
        self.lora_k_down = nn.Parameter(torch.randn(rank, context_dim, generator=generator) * scale)
        self.lora_k_up = nn.Parameter(torch.zeros(channels, rank))
        self.lora_v_down = nn.Parameter(torch.randn(rank, context_dim, generator=generator) * scale)
        self.lora_v_up = nn.Parameter(torch.zeros(channels, rank))

    def forward(self, x: torch.Tensor, context: torch.Tensor, valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k = self.to_k(context)
        v = self.to_v(context)
        if self.lora_rank:
            k = k + context @ self.lora_k_down.T @ self.lora_k_up.T
            v = v + context @ self.lora_v_down.T @ self.lora_v_up.T
        scores = q @ k.transpose(1, 2) / math.sqrt(c)
        scores = scores.masked_fill(~valid[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = self.to_out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out, attn


class Denoiser(nn.Module):
    """Two-level U-shaped noise predictor with cross-attention at the coarsest grid (H/4 x W/4)."""

    def __init__(self, shape: DenoiserShape) -> None:
        super().__init__()
        self.shape = shape
        c, g = shape.channels, shape.groups
        self.time_mlp = nn.Sequential(
            nn.Linear(shape.time_dim, shape.time_dim), nn.SiLU(), nn.Linear(shape.time_dim, shape.time_dim)
        )
        self.text = TextMixer(shape.embed_dim)
        self.inc = nn.Conv2d(3, c, 3, padding=1)
        self.down1 = ResBlock(c, c, shape.time_dim, g)
        self.ds1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.down2 = ResBlock(2 * c, 2 * c, shape.time_dim, g)
        self.ds2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * c, 2 * c, shape.time_dim, g)
        self.attn = CrossAttention(2 * c, shape.embed_dim, g, shape.lora_rank)
        self.mid2 = ResBlock(2 * c, 2 * c, shape.time_dim, g)
        self.up2 = ResBlock(4 * c, 2 * c, shape.time_dim, g)
        self.up1 = ResBlock(3 * c, c, shape.time_dim, g)
        self.out_norm = nn.GroupNorm(min(g, c), c)
        self.out = nn.Conv2d(c, 3, 3, padding=1)

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        context: torch.Tensor,
        valid: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        temb = self.time_mlp(timestep_embedding(t, self.shape.time_dim).to(z.dtype))
        ctx = self.text(context.to(z.dtype), valid)
        h0 = self.down1(self.inc(z), temb)
        h1 = self.down2(self.ds1(h0), temb)
        h = self.mid1(self.ds2(h1), temb)
        coarse = h.shape[-2:]
        h, attn = self.attn(h, ctx, valid)
        h = self.mid2(h, temb)
        h = self.up2(torch.cat([F.interpolate(h, size=h1.shape[-2:], mode="nearest"), h1], dim=1), temb)
        h = self.up1(torch.cat([F.interpolate(h, size=h0.shape[-2:], mode="nearest"), h0], dim=1), temb)
        eps = self.out(F.silu(self.out_norm(h)))
        attn_maps = attn.transpose(1, 2).reshape(z.shape[0], attn.shape[-1], coarse[0], coarse[1])
        return eps, attn_maps


@dataclass(frozen=True, eq=False)
class DenoiseOutput:
    eps_hat: torch.Tensor
    attn: torch.Tensor  # (B, prompt length, h, w); token-normalized at every grid cell

    def map_for(self, position: int) -> torch.Tensor:
        return self.attn[:, position]


def denoise_predict(
    z: torch.Tensor,
    t: int | torch.Tensor,
    prompt: PromptSpec,
    table: TokenTable,
    params: Denoiser,
) -> DenoiseOutput:
    """Noise prediction for ``z`` at ``t`` under ``prompt``, with one attention map per prompt token."""
    batched = z if z.ndim == 4 else z.unsqueeze(0)
    n = batched.shape[0]
    steps = t if isinstance(t, torch.Tensor) and t.ndim > 0 else torch.full((n,), int(t), dtype=torch.long)
    if steps.min() < 0 or steps.max() >= params.shape.timesteps:
        raise PreconditionError(f"Timestep out of range [0,{params.shape.timesteps})")
    context, valid = table.embed(prompt, dtype=batched.dtype)
    eps, attn = params(batched, steps, context.expand(n, -1, -1), valid.expand(n, -1))
    attn = attn[:, : len(prompt.tokens)]
    if z.ndim != 4:
        return DenoiseOutput(eps[0], attn[0])
    return DenoiseOutput(eps, attn)


def build_model(shape: DenoiserShape, seed: int) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "denoiser-init"))
        return Denoiser(shape)

