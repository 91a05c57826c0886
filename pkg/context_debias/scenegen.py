from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from context_debias.errors import PreconditionError, SchemaError
from context_debias.glyphs import Pose, background_texture, glyph_vertices, instance_color, rasterize
from context_debias.schema import CONTEXT_SHAPES, OBJECT_SHAPES, CategorySchema
from context_debias.seeding import numpy_rng

LOGGER = logging.getLogger("context-debias")

SPLITS = ("train", "val", "test")

# Per-pixel sensor grain added on top of every rendered scene.
GRAIN_STD = 0.03


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to re-render a scene bit-identically.

    ``object_poses`` lists (category, pose) back to front; each foreground category named by
    ``biased_object``, ``context_object`` or ``secondary_context`` appears there exactly once.
    """

    biased_object: str | None
    context_object: str | None
    background: str
    object_poses: tuple[tuple[str, Pose], ...]
    seed: int
    secondary_context: str | None = None
    image_size: int = 32

    def pose_of(self, category: str) -> Pose | None:
        for name, pose in self.object_poses:
            if name == category:
                return pose
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "biased_object": self.biased_object,
            "context_object": self.context_object,
            "secondary_context": self.secondary_context,
            "background": self.background,
            "object_poses": [
                [name, [pose.x, pose.y], pose.size, pose.rotation] for name, pose in self.object_poses
            ],
            "seed": self.seed,
            "image_size": self.image_size,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> SceneSpec:
        poses = tuple(
            (str(name), Pose(x=float(xy[0]), y=float(xy[1]), size=float(size), rotation=float(rot)))
            for name, xy, size, rot in raw.get("object_poses") or []
        )
        return cls(
            biased_object=raw.get("biased_object"),
            context_object=raw.get("context_object"),
            secondary_context=raw.get("secondary_context"),
            background=str(raw["background"]),
            object_poses=poses,
            seed=int(raw["seed"]),
            image_size=int(raw.get("image_size") or 32),
        )


@dataclass(frozen=True, eq=False)
class ImageSample:
    id: str
    pixels: np.ndarray
    masks: dict[str, np.ndarray]
    labels: frozenset[str]
    group: tuple[str | None, str | None]
    split: str
    scene: SceneSpec | None = None

    @property
    def foreground_union(self) -> np.ndarray:
        h, w = self.pixels.shape[:2]
        union = np.zeros((h, w), dtype=bool)
        background = self.scene.background if self.scene is not None else None
        for category, mask in self.masks.items():
            if category != background:
                union |= mask
        return union


@dataclass(frozen=True)
class Dataset:
    schema: CategorySchema
    samples: tuple[ImageSample, ...]
    mode: str = "multi_label"
    image_size: int = 32

    def split(self, name: str) -> list[ImageSample]:
        return [s for s in self.samples if s.split == name]

    def by_id(self) -> dict[str, ImageSample]:
        return {s.id: s for s in self.samples}

    def label_sets(self, split: str | None = None) -> dict[str, frozenset[str]]:
        return {s.id: s.labels for s in self.samples if split is None or s.split == split}

    def groups(self, split: str | None = None) -> dict[str, tuple[str | None, str | None]]:
        return {s.id: s.group for s in self.samples if split is None or s.split == split}


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    """N x C x H x W float32 batch."""
    if not samples:
        return np.zeros((0, 3, 1, 1), dtype=np.float32)
    return np.stack([s.pixels.transpose(2, 0, 1) for s in samples]).astype(np.float32)


def multi_hot(label_sets: Sequence[frozenset[str]], categories: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(categories)}
    out = np.zeros((len(label_sets), len(categories)), dtype=np.float32)
    for row, labels in enumerate(label_sets):
        for label in labels:
            if label in index:
                out[row, index[label]] = 1.0
    return out


def _check_pose(category: str, pose: Pose, size: int) -> None:
    r = pose.radius
    if pose.x - r < -1e-9 or pose.y - r < -1e-9 or pose.x + r > size + 1e-9 or pose.y + r > size + 1e-9:
        raise PreconditionError(f"Pose leaves the canvas category={category} pose={pose}")


def render_scene(spec: SceneSpec, schema: CategorySchema) -> ImageSample:
    """Render ``spec`` into pixels, exact per-category masks and its label set.

    A foreground category that ends up fully covered by glyphs drawn in front of it carries
    neither a label nor a mask.
    """
    schema.require(spec.biased_object, spec.context_object, spec.secondary_context, spec.background)
    if spec.background not in schema.background_classes:
        raise SchemaError(f"Not a background category id={spec.background}")
    named = {c for c in (spec.biased_object, spec.context_object, spec.secondary_context) if c is not None}
    posed = [name for name, _ in spec.object_poses]
    if sorted(posed) != sorted(named):
        raise SchemaError(f"Scene poses do not match its categories posed={posed} named={sorted(named)}")

    size = int(spec.image_size)
    pixels = background_texture(schema, spec.background, size, spec.seed)
    label_map = np.full((size, size), schema.index(spec.background), dtype=np.int32)
    for category, pose in spec.object_poses:
        shape = schema.appearance[category].shape
        if shape not in OBJECT_SHAPES and shape not in CONTEXT_SHAPES:
            raise SchemaError(f"Category has no glyph id={category} shape={shape}")
        _check_pose(category, pose, size)
        glyph = rasterize(glyph_vertices(shape, pose), size, size)
        pixels[glyph] = instance_color(schema, category, spec.seed)
        label_map[glyph] = schema.index(category)

    grain = numpy_rng(spec.seed, "grain").normal(0.0, GRAIN_STD, pixels.shape)
    pixels = np.clip(pixels + grain, 0.0, 1.0).astype(np.float32)

    visible = {c for c in named if bool((label_map == schema.index(c)).any())}
    if visible != named:
        LOGGER.debug("Dropped occluded categories scene_seed=%s hidden=%s", spec.seed, sorted(named - visible))
    labels = frozenset(visible | {spec.background})
    masks = {category: label_map == schema.index(category) for category in sorted(labels)}
    return ImageSample(
        id=f"scene-{spec.seed}",
        pixels=pixels,
        masks=masks,
        labels=labels,
        group=(spec.biased_object, spec.context_object),
        split="train",
        scene=spec,
    )
