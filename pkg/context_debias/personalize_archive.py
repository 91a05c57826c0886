from __future__ import annotations

import csv
from pathlib import Path
from typing import Any

import numpy as np
import torch

from context_debias.errors import CheckpointFormatError
from context_debias.personalize import PersonalizationResult
from context_debias.tokens import LearnedToken

RESULT_VERSION = 1


def save_result(result: PersonalizationResult, directory: Path) -> Path:
    """``result.pt`` plus ``trace.csv`` under ``directory``."""
    directory.mkdir(parents=True, exist_ok=True)
    payload: dict[str, Any] = {
        "format_version": RESULT_VERSION,
        "source_id": result.source_id,
        "variant": result.variant,
        "tokens": [[tok.token_id, tok.name] for tok in result.tokens],
        "init_words": {k: v for k, v in result.init_words.items()},
        "embeddings": {str(k): v for k, v in result.embeddings.items()},
        "model_delta": result.model_delta,
        "low_rank": result.low_rank,
        "trace": torch.tensor(result.trace, dtype=torch.float64).reshape(-1, 3),
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "attention": {k: torch.from_numpy(v) for k, v in result.attention.items()},
        "masks": {k: torch.from_numpy(v.astype(np.bool_)) for k, v in result.masks.items()},
        "seed": result.seed,
    }
    path = directory / "result.pt"
    tmp = path.with_name(f"{path.name}.tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    with open(directory / "trace.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "maskrec", "crossattn", "total"])
        for i, row in enumerate(result.trace):
            writer.writerow([i, *(repr(x) for x in row)])
    return path


def load_result(directory: Path) -> PersonalizationResult:
    path = directory / "result.pt"
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointFormatError(
            f"Unreadable personalization archive path={path} error={type(exc).__name__}: {exc}"
        ) from exc
    if not isinstance(raw, dict) or raw.get("format_version") != RESULT_VERSION:
        raise CheckpointFormatError(f"Unsupported personalization archive path={path}")
    try:
        tokens = tuple(LearnedToken(int(i), str(n)) for i, n in raw["tokens"])
        return PersonalizationResult(
            source_id=str(raw["source_id"]),
            variant=str(raw["variant"]),
            tokens=tokens,
            init_words={str(k): (None if v is None else str(v)) for k, v in raw["init_words"].items()},
            embeddings={int(k): v for k, v in raw["embeddings"].items()},
            model_delta=dict(raw["model_delta"]),
            low_rank=int(raw["low_rank"]),
            trace=[(float(a), float(b), float(c)) for a, b, c in raw["trace"].tolist()],
            initial_loss=float(raw["initial_loss"]),
            final_loss=float(raw["final_loss"]),
            attention={str(k): v.numpy() for k, v in raw["attention"].items()},
            masks={str(k): v.numpy().astype(bool) for k, v in raw["masks"].items()},
            seed=int(raw["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"Malformed personalization archive path={path} error={exc}") from exc
