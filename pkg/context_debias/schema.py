from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from context_debias.errors import SchemaError

OBJECT_SHAPES = ("square", "triangle", "pentagon", "hexagon", "star", "cross", "circle", "bar")
CONTEXT_SHAPES = ("tall", "wide", "tee", "block")
TEXTURE_KINDS = ("noise", "flat")


@dataclass(frozen=True)
class Appearance:
    """Glyph shape (foreground) or texture kind (background) plus a base RGB color in [0,1]."""

    shape: str
    color: tuple[float, float, float]


@dataclass(frozen=True)
class DesignatedPair:
    biased: str
    context: str
    rho: float | None = None


@dataclass(frozen=True)
class CategorySchema:
    object_classes: tuple[str, ...]
    context_classes: tuple[str, ...]
    background_classes: tuple[str, ...]
    hierarchy: Mapping[str, tuple[str, ...]]
    replacement_lists: Mapping[str, tuple[str, ...]]
    designated_pairs: tuple[DesignatedPair, ...] = ()
    appearance: Mapping[str, Appearance] = field(default_factory=dict)

    @property
    def categories(self) -> tuple[str, ...]:
        return (*self.object_classes, *self.context_classes, *self.background_classes)

    def index(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise SchemaError(f"Unknown category id={category}") from None

    def require(self, *categories: str | None) -> None:
        known = set(self.categories)
        for category in categories:
            if category is not None and category not in known:
                raise SchemaError(f"Unknown category id={category}")

    def superclass_of(self, category: str) -> str | None:
        for parent, members in self.hierarchy.items():
            if category in members:
                return parent
        return None

    def designated_context(self, biased: str) -> str | None:
        for pair in self.designated_pairs:
            if pair.biased == biased:
                return pair.context
        return None

    def validate(self) -> None:
        seen: set[str] = set()
        for category in self.categories:
            if not category or category in seen:
                raise SchemaError(f"Duplicate or empty category id={category!r}")
            seen.add(category)
        if not self.object_classes or not self.background_classes:
            raise SchemaError("Schema needs at least one object class and one background")

        for key, members in self.replacement_lists.items():
            self.require(key, *members)
            if len(set(members)) != len(members):
                raise SchemaError(f"Replacement list has duplicates key={key}")
            parent = self.superclass_of(key)
            for member in members:
                if member == key:
                    raise SchemaError(f"Replacement list contains its own key key={key}")
                if parent is None or self.superclass_of(member) != parent:
                    raise SchemaError(f"Replacement does not share a superclass key={key} member={member}")

        biased_seen: set[str] = set()
        for pair in self.designated_pairs:
            self.require(pair.biased, pair.context)
            if pair.biased == pair.context:
                raise SchemaError(f"Designated pair repeats a category id={pair.biased}")
            if pair.biased not in self.object_classes:
                raise SchemaError(f"Designated biased class is not an object id={pair.biased}")
            if pair.biased in biased_seen:
                raise SchemaError(f"Object has two designated contexts id={pair.biased}")
            biased_seen.add(pair.biased)
            if pair.rho is not None and not 0.0 <= pair.rho <= 1.0:
                raise SchemaError(f"Designated rho out of range pair={pair.biased}/{pair.context}")

        for category in self.categories:
            if category not in self.appearance:
                raise SchemaError(f"Missing appearance id={category}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "object_classes": list(self.object_classes),
            "context_classes": list(self.context_classes),
            "background_classes": list(self.background_classes),
            "hierarchy": {k: list(v) for k, v in self.hierarchy.items()},
            "replacement_lists": {k: list(v) for k, v in self.replacement_lists.items()},
            "designated_pairs": [
                {"biased": p.biased, "context": p.context, "rho": p.rho} for p in self.designated_pairs
            ],
            "appearance": {k: {"shape": a.shape, "color": list(a.color)} for k, a in self.appearance.items()},
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> CategorySchema:
        if not isinstance(raw, Mapping):
            raise SchemaError("Schema JSON must be an object")
        try:
            schema = cls(
                object_classes=tuple(str(x) for x in raw["object_classes"]),
                context_classes=tuple(str(x) for x in raw.get("context_classes") or []),
                background_classes=tuple(str(x) for x in raw["background_classes"]),
                hierarchy={str(k): tuple(str(x) for x in v) for k, v in (raw.get("hierarchy") or {}).items()},
                replacement_lists={
                    str(k): tuple(str(x) for x in v) for k, v in (raw.get("replacement_lists") or {}).items()
                },
                designated_pairs=tuple(
                    DesignatedPair(
                        biased=str(p["biased"]),
                        context=str(p["context"]),
                        rho=None if p.get("rho") is None else float(p["rho"]),
                    )
                    for p in raw.get("designated_pairs") or []
                ),
                appearance={
                    str(k): Appearance(shape=str(v["shape"]), color=_color(v["color"]))
                    for k, v in (raw.get("appearance") or {}).items()
                },
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"Malformed schema: {exc}") from exc
        schema.validate()
        return schema


def _color(raw: Sequence[float]) -> tuple[float, float, float]:
    r, g, b = (float(x) for x in raw)
    return (r, g, b)


def load_schema(path: Path) -> CategorySchema:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"Failed to read schema path={path} error={exc}") from exc
    return CategorySchema.from_dict(raw)


def save_schema(schema: CategorySchema, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(schema.to_dict(), ensure_ascii=False, sort_keys=True, indent=2), encoding="utf-8")


_OBJECTS = ("handbag", "skis", "skateboard", "wineglass", "microwave", "snowboard", "glove", "kite")
_CONTEXTS = ("person", "dog", "table", "cabinet")
_BACKGROUNDS = ("grass", "sand", "snow", "road")

_OBJECT_COLORS = (
    (0.85, 0.20, 0.20),
    (0.20, 0.35, 0.90),
    (0.95, 0.60, 0.10),
    (0.60, 0.20, 0.80),
    (0.15, 0.75, 0.75),
    (0.90, 0.20, 0.65),
    (0.55, 0.85, 0.15),
    (0.95, 0.90, 0.20),
)
_CONTEXT_COLORS = ((0.75, 0.55, 0.45), (0.50, 0.35, 0.20), (0.40, 0.25, 0.15), (0.65, 0.65, 0.70))
_BACKGROUND_LOOKS = (
    ("noise", (0.30, 0.55, 0.25)),
    ("noise", (0.80, 0.72, 0.52)),
    ("flat", (0.92, 0.94, 0.97)),
    ("flat", (0.30, 0.30, 0.32)),
)


def default_schema(mode: str = "multi_label") -> CategorySchema:
    """Built-in synthetic schema: 8 objects, 4 contexts in 2 superclasses, 4 backgrounds."""
    appearance: dict[str, Appearance] = {}
    for name, shape, color in zip(_OBJECTS, OBJECT_SHAPES, _OBJECT_COLORS, strict=True):
        appearance[name] = Appearance(shape=shape, color=color)
    for name, shape, color in zip(_CONTEXTS, CONTEXT_SHAPES, _CONTEXT_COLORS, strict=True):
        appearance[name] = Appearance(shape=shape, color=color)
    for name, (kind, color) in zip(_BACKGROUNDS, _BACKGROUND_LOOKS, strict=True):
        appearance[name] = Appearance(shape=kind, color=color)

    if mode == "single_label":
        pairs = (
            DesignatedPair("handbag", "grass"),
            DesignatedPair("skis", "snow"),
            DesignatedPair("wineglass", "sand"),
            DesignatedPair("microwave", "road"),
        )
    else:
        pairs = (
            DesignatedPair("handbag", "person"),
            DesignatedPair("skis", "dog"),
            DesignatedPair("wineglass", "table"),
            DesignatedPair("microwave", "cabinet"),
        )

    replacement_lists = {
        "person": ("dog",),
        "dog": ("person",),
        "table": ("cabinet",),
        "cabinet": ("table",),
    }
    for bg in _BACKGROUNDS:
        replacement_lists[bg] = tuple(other for other in _BACKGROUNDS if other != bg)

    hierarchy = {
        "accessory": _OBJECTS,
        "living": ("person", "dog"),
        "furniture": ("table", "cabinet"),
        "scenery": _BACKGROUNDS,
    }
    contexts = _CONTEXTS
    if mode == "single_label":
        # Single-object scenes: backgrounds play the role of contexts.
        contexts = ()
        hierarchy = {k: v for k, v in hierarchy.items() if k in {"accessory", "scenery"}}
        replacement_lists = {bg: replacement_lists[bg] for bg in _BACKGROUNDS}
        appearance = {k: v for k, v in appearance.items() if k not in _CONTEXTS}

    schema = CategorySchema(
        object_classes=_OBJECTS,
        context_classes=contexts,
        background_classes=_BACKGROUNDS,
        hierarchy=hierarchy,
        replacement_lists=replacement_lists,
        designated_pairs=pairs,
        appearance=appearance,
    )
    schema.validate()
    return schema
