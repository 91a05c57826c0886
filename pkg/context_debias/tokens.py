"""Prompt tokens and the embedding table shared by training, personalization and sampling."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import torch

from context_debias.errors import DimensionError, PreconditionError, TokenResolutionError

MAX_TOKENS = 12
PAD = "<pad>"
TEMPLATE_WORDS = (PAD, "a", "photo", "of", "at", "and", "in")


@dataclass(frozen=True)
class LiteralWord:
    word: str

    @property
    def display(self) -> str:
        return self.word


@dataclass(frozen=True)
class LearnedToken:
    token_id: int
    name: str

    @property
    def display(self) -> str:
        return self.name


PromptToken = LiteralWord | LearnedToken


@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple[PromptToken, ...]
    template: str = ""

    def __post_init__(self) -> None:
        if not self.tokens:
            raise PreconditionError("Prompt needs at least one token")
        if len(self.tokens) > MAX_TOKENS:
            raise DimensionError(f"Prompt has {len(self.tokens)} tokens, max {MAX_TOKENS}")

    @property
    def text(self) -> str:
        return " ".join(tok.display for tok in self.tokens)

    def position_of(self, name: str) -> int:
        for i, tok in enumerate(self.tokens):
            if tok.display == name:
                return i
        raise TokenResolutionError(f"Token not in prompt name={name}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "template": self.template,
            "tokens": [
                {"learned": tok.token_id, "name": tok.name} if isinstance(tok, LearnedToken) else {"word": tok.word}
                for tok in self.tokens
            ],
        }


def literal_prompt(text: str) -> PromptSpec:
    words = text.split()
    return PromptSpec(tuple(LiteralWord(w) for w in words), template=text)


class TokenTable:
    """Frozen base vocabulary plus learned embeddings keyed by ids past the base range."""

    def __init__(
        self,
        words: Sequence[str],
        base: torch.Tensor,
        learned: dict[int, torch.Tensor] | None = None,
        names: dict[int, str] | None = None,
    ) -> None:
        if base.ndim != 2 or base.shape[0] != len(words):
            raise DimensionError("Base embeddings must be (vocab, dim)")
        self.words = tuple(words)
        self._index = {w: i for i, w in enumerate(self.words)}
        self.base = base.detach().clone()
        self.learned: dict[int, torch.Tensor] = {}
        self.names: dict[int, str] = {}
        for token_id, vector in (learned or {}).items():
            self._set(token_id, vector, (names or {}).get(token_id, f"[V{token_id}]"))

    @property
    def dim(self) -> int:
        return int(self.base.shape[1])

    def word_id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise TokenResolutionError(f"Word not in vocabulary word={word}") from None

    def word_vector(self, word: str) -> torch.Tensor:
        return self.base[self.word_id(word)]

    def _set(self, token_id: int, vector: torch.Tensor, name: str) -> None:
        if token_id < len(self.words):
            raise TokenResolutionError(f"Learned id overlaps base vocabulary id={token_id}")
        if vector.shape != (self.dim,):
            raise DimensionError(f"Learned embedding must have dim {self.dim}")
        self.learned[token_id] = vector
        self.names[token_id] = name

    def add_token(self, name: str, init: torch.Tensor) -> LearnedToken:
        token_id = len(self.words) + len(self.learned)
        while token_id in self.learned:
            token_id += 1
        self._set(token_id, init.detach().clone().to(self.base.dtype).requires_grad_(True), name)
        return LearnedToken(token_id, name)

    def vector(self, token: PromptToken) -> torch.Tensor:
        if isinstance(token, LearnedToken):
            try:
                return self.learned[token.token_id]
            except KeyError:
                raise TokenResolutionError(f"Learned token unresolved id={token.token_id} name={token.name}") from None
        return self.word_vector(token.word)

    def embed(self, prompt: PromptSpec, dtype: torch.dtype | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """(MAX_TOKENS, d) context and its validity mask; padding rows hold the pad embedding."""
        rows = [self.vector(tok) for tok in prompt.tokens]
        pad = self.base[self.word_id(PAD)]
        rows.extend(pad for _ in range(MAX_TOKENS - len(rows)))
        context = torch.stack(rows)
        if dtype is not None:
            context = context.to(dtype)
        valid = torch.zeros(MAX_TOKENS, dtype=torch.bool)
        valid[: len(prompt.tokens)] = True
        return context, valid

    def embed_batch(
        self, prompts: Sequence[PromptSpec], dtype: torch.dtype | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        pairs = [self.embed(p, dtype) for p in prompts]
        return torch.stack([c for c, _ in pairs]), torch.stack([v for _, v in pairs])

    def with_base(self, base: torch.Tensor) -> TokenTable:
        return TokenTable(self.words, base, {k: v.detach().clone() for k, v in self.learned.items()}, dict(self.names))

    def detached(self) -> TokenTable:
        return self.with_base(self.base)

    def to_state(self) -> dict[str, Any]:
        return {
            "words": list(self.words),
            "base": self.base.detach().clone(),
            "learned": {str(k): v.detach().clone() for k, v in self.learned.items()},
            "names": {str(k): v for k, v in self.names.items()},
        }

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> TokenTable:
        learned = {int(k): v for k, v in (state.get("learned") or {}).items()}
        names = {int(k): str(v) for k, v in (state.get("names") or {}).items()}
        return cls([str(w) for w in state["words"]], state["base"], learned, names)

