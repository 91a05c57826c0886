"""Image regions bound to learned prompt tokens during personalization."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from context_debias.errors import DimensionError, PreconditionError, TokenResolutionError
from context_debias.scenegen import ImageSample
from context_debias.tokens import LearnedToken, LiteralWord, PromptSpec

LOGGER = logging.getLogger("context-debias")

BACKGROUND_TOKEN = "[Vbackground]"
CLASS_TOKEN = "[Vclass]"
CONTEXT_TOKEN = "[Vcontext]"


@dataclass(frozen=True, eq=False)
class TokenRegion:
    name: str
    mask: np.ndarray
    init_word: str | None = None

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True, eq=False)
class TokenAssignment:
    regions: tuple[TokenRegion, ...]
    variant: str = "multi"

    def __post_init__(self) -> None:
        if not self.regions:
            raise PreconditionError("Token assignment needs at least one region")
        shape = self.regions[0].mask.shape
        seen = np.zeros(shape, dtype=bool)
        for region in self.regions:
            if region.mask.shape != shape:
                raise DimensionError(f"Region mask shape mismatch token={region.name}")
            if (seen & region.mask).any():
                raise PreconditionError(f"Region masks overlap token={region.name}")
            seen |= region.mask

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.regions)

    def region(self, name: str) -> TokenRegion:
        for r in self.regions:
            if r.name == name:
                return r
        raise TokenResolutionError(f"Token not in assignment name={name}")

    @property
    def union(self) -> np.ndarray:
        out = np.zeros(self.regions[0].mask.shape, dtype=bool)
        for r in self.regions:
            out |= r.mask
        return out


def _keep_regions(regions: Sequence[TokenRegion], min_area: int) -> tuple[TokenRegion, ...]:
    kept: list[TokenRegion] = []
    for region in regions:
        if region.area < min_area:
            LOGGER.warning("Dropping token with degenerate mask token=%s area=%s", region.name, region.area)
            continue
        kept.append(region)
    return tuple(kept)


def build_assignment(
    image: ImageSample,
    *,
    biased: str,
    context: str | None = None,
    variant: str = "multi",
    background: str | None = None,
    min_area: int = 4,
) -> TokenAssignment:
    """Regions for [V<b>], [V<c>] and [Vbackground] (multi) or [Vclass] and [Vcontext] (single).

    The background region is every pixel outside the object (and context) masks.
    """
    if biased not in image.masks:
        raise PreconditionError(f"Image has no mask for the object id={image.id} category={biased}")
    obj_mask = image.masks[biased]
    bg_word = background or (image.scene.background if image.scene is not None else None)
    if variant == "single":
        regions = [
            TokenRegion(CLASS_TOKEN, obj_mask.copy(), biased),
            TokenRegion(CONTEXT_TOKEN, ~obj_mask, bg_word),
        ]
    elif variant == "multi":
        if context is None or context not in image.masks:
            raise PreconditionError(f"Image has no mask for the context id={image.id} category={context}")
        ctx_mask = image.masks[context] & ~obj_mask
        regions = [
            TokenRegion(f"[V{biased}]", obj_mask.copy(), biased),
            TokenRegion(f"[V{context}]", ctx_mask, context),
            TokenRegion(BACKGROUND_TOKEN, ~(obj_mask | ctx_mask), bg_word),
        ]
    else:
        raise PreconditionError(f"Unknown assignment variant={variant}")
    return TokenAssignment(_keep_regions(regions, min_area), variant)


def personalization_prompt(tokens: Sequence[LearnedToken]) -> PromptSpec:
    """"a photo of [Vb] and [Vc] and [Vbackground]" over whichever tokens survived."""
    words: list[LiteralWord | LearnedToken] = [LiteralWord("a"), LiteralWord("photo"), LiteralWord("of")]
    for i, tok in enumerate(tokens):
        if i:
            words.append(LiteralWord("and"))
        words.append(tok)
    return PromptSpec(tuple(words), template=" ".join(w.display for w in words))
