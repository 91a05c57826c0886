from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from context_debias.denoiser import Denoiser, DenoiserShape
from context_debias.errors import CheckpointFormatError, DimensionError, PreconditionError
from context_debias.tokens import PromptSpec, TokenTable

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: tuple[float, ...]

    def __post_init__(self) -> None:
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise PreconditionError("Noise schedule needs at least one beta")
        if (b <= 0).any() or (b >= 1).any():
            raise PreconditionError("Betas must lie in (0,1)")
        if (np.diff(b) < 0).any():
            raise PreconditionError("Betas must be non-decreasing")

    @classmethod
    def linear(cls, timesteps: int = 200, start: float = 1e-4, end: float = 0.02) -> NoiseSchedule:
        return cls(tuple(float(x) for x in np.linspace(start, end, timesteps)))

    @property
    def T(self) -> int:  # noqa: N802
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - np.asarray(self.betas, dtype=np.float64)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def check_timestep(self, t: int | torch.Tensor) -> None:
        values = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if values.size and (values.min() < 0 or values.max() >= self.T):
            raise PreconditionError(f"Timestep out of range [0,{self.T})")

    def alpha_bar(self, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        table = torch.as_tensor(self.alpha_bars, dtype=like.dtype)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            ab = table[t.long()]
            return ab.reshape(-1, *([1] * (like.ndim - 1)))
        return table[int(t)]

    def respaced(self, steps: int) -> list[int]:
        """Kept timesteps in descending order; all T when ``steps == T``."""
        if steps < 1 or steps > self.T:
            raise PreconditionError(f"steps must lie in [1, {self.T}] got={steps}")
        kept = np.unique(np.rint(np.linspace(0, self.T - 1, steps)).astype(np.int64))
        return [int(x) for x in kept[::-1]]


def forward_noise(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise DimensionError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    schedule.check_timestep(t)
    ab = schedule.alpha_bar(t, like=x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def to_model_space(pixels: np.ndarray | torch.Tensor) -> torch.Tensor:
    """H x W x 3 in [0,1] (or N x H x W x 3) to channels-first tensors in [-1,1]."""
    x = torch.as_tensor(np.asarray(pixels), dtype=torch.float32)
    x = x.permute(2, 0, 1) if x.ndim == 3 else x.permute(0, 3, 1, 2)
    return x * 2.0 - 1.0


def sample(
    prompt: PromptSpec,
    table: TokenTable,
    params: Denoiser,
    seed: int,
    steps: int,
    *,
    schedule: NoiseSchedule,
    image_size: int = 32,
) -> np.ndarray:
    """Ancestral sampling over the respaced schedule; returns H x W x 3 in [0,1]."""
    timesteps = schedule.respaced(steps)
    ab = schedule.alpha_bars
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    dtype = next(params.parameters()).dtype
    x = torch.randn((1, 3, image_size, image_size), generator=gen, dtype=dtype)
    context, valid = table.embed(prompt, dtype=dtype)
    context, valid = context.detach()[None], valid[None]
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            ab_t = float(ab[t])
            ab_prev = float(ab[timesteps[i + 1]]) if i + 1 < len(timesteps) else 1.0
            beta = 1.0 - ab_t / ab_prev
            eps, _ = params(x, torch.tensor([t], dtype=torch.long), context, valid)
            mean = (x - beta / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(1.0 - beta)
            if i + 1 < len(timesteps):
                var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
                x = mean + math.sqrt(var) * torch.randn(x.shape, generator=gen, dtype=dtype)
            else:
                x = mean
    img = ((x[0] + 1.0) / 2.0).clamp(0.0, 1.0)
    return img.permute(1, 2, 0).cpu().numpy().astype(np.float32)


@dataclass
class DiffusionBundle:
    model: Denoiser
    table: TokenTable
    schedule: NoiseSchedule
    loss_trace: list[float] = field(default_factory=list)


def save_checkpoint(path: Path, bundle: DiffusionBundle) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "shape": asdict(bundle.model.shape),
        "state_dict": {k: v.detach().clone() for k, v in bundle.model.state_dict().items()},
        "table": bundle.table.to_state(),
        "betas": list(bundle.schedule.betas),
    }
    tmp = path.with_name(f"{path.name}.tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path) -> DiffusionBundle:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointFormatError(f"Unreadable checkpoint path={path} error={type(exc).__name__}: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointFormatError(f"Checkpoint is not a mapping path={path}")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint format_version={version} path={path}")
    try:
        shape = DenoiserShape(**payload["shape"])
        model = Denoiser(shape)
        model.load_state_dict(payload["state_dict"])
        table = TokenTable.from_state(payload["table"])
        schedule = NoiseSchedule(tuple(float(b) for b in payload["betas"]))
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointFormatError(f"Malformed checkpoint path={path} error={exc}") from exc
    model.eval()
    return DiffusionBundle(model=model, table=table, schedule=schedule)

