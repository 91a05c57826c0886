from __future__ import annotations

import dataclasses
from collections.abc import Sequence

import numpy as np

from context_debias.glyphs import Pose
from context_debias.scenegen import ImageSample, SceneSpec, render_scene
from context_debias.schema import CategorySchema
from context_debias.seeding import derive_seed, numpy_rng


def pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return str(options[int(rng.integers(len(options)))])


def place_poses(
    rng: np.random.Generator,
    size: int,
    *,
    obj: str | None,
    ctx: str | None,
    secondary: str | None,
) -> tuple[tuple[str, Pose], ...]:
    """Back-to-front poses on a shared support line: secondary context, context, then object."""
    s = float(size)
    ground = s - 1.0
    layers: list[tuple[str, Pose]] = []

    anchor = s / 2.0
    ctx_pose = None
    obj_pose = None
    if ctx is not None:
        rc = rng.uniform(0.40, 0.55) * s / 2.0
        ro = rng.uniform(0.18, 0.28) * s / 2.0
        gap = rc + ro - 1.0
        side = 1.0 if rng.random() < 0.5 else -1.0
        lo, hi = _context_range(s, rc, ro, gap, side)
        if lo > hi:
            side = -side
            lo, hi = _context_range(s, rc, ro, gap, side)
        xc = rng.uniform(lo, hi)
        ctx_pose = Pose(x=xc, y=ground - rc, size=2.0 * rc, rotation=rng.uniform(-5.0, 5.0))
        if obj is not None:
            # Held against the context at mid-height, overlapping its edge by one pixel.
            obj_pose = Pose(x=xc + side * gap, y=ground - rc, size=2.0 * ro, rotation=rng.uniform(-15.0, 15.0))
        anchor = xc
    elif obj is not None:
        ro = rng.uniform(0.18, 0.28) * s / 2.0
        xo = rng.uniform(ro, s - ro)
        obj_pose = Pose(x=xo, y=ground - ro, size=2.0 * ro, rotation=rng.uniform(-15.0, 15.0))
        anchor = xo

    if secondary is not None:
        rs = rng.uniform(0.40, 0.55) * s / 2.0
        shift = rng.uniform(0.0, 2.0)
        xs = s - rs - shift if anchor < s / 2.0 else rs + shift
        xs = min(max(xs, rs), s - rs)
        layers.append((secondary, Pose(x=xs, y=ground - rs, size=2.0 * rs, rotation=rng.uniform(-5.0, 5.0))))
    if ctx is not None and ctx_pose is not None:
        layers.append((ctx, ctx_pose))
    if obj is not None and obj_pose is not None:
        layers.append((obj, obj_pose))
    return tuple(layers)


def _context_range(s: float, rc: float, ro: float, gap: float, side: float) -> tuple[float, float]:
    lo, hi = rc, s - rc
    if side > 0:
        hi = min(hi, s - ro - gap)
    else:
        lo = max(lo, ro + gap)
    return lo, hi


def synth_unbiased(
    schema: CategorySchema,
    *,
    n: int,
    seed: int,
    image_size: int,
    blank_fraction: float = 0.05,
) -> list[ImageSample]:
    """Independent, uniformly drawn scenes for annotator training, plus blank negatives."""
    samples: list[ImageSample] = []
    contexts = schema.context_classes
    n_blank = round(n * blank_fraction)
    for k in range(n - n_blank):
        rng = numpy_rng(seed, "unbiased", k)
        obj = pick(rng, schema.object_classes) if rng.random() < 0.9 else None
        ctx = pick(rng, contexts) if contexts and rng.random() < 0.5 else None
        others = [c for c in contexts if c != ctx]
        secondary = pick(rng, others) if others and rng.random() < 0.25 else None
        background = pick(rng, schema.background_classes)
        poses = place_poses(rng, image_size, obj=obj, ctx=ctx, secondary=secondary)
        spec = SceneSpec(obj, ctx, background, poses, derive_seed(seed, "unbiased-image", k), secondary, image_size)
        samples.append(dataclasses.replace(render_scene(spec, schema), id=f"u{k:06d}"))
    for k in range(n_blank):
        rng = numpy_rng(seed, "blank", k)
        pixels = np.broadcast_to(rng.uniform(0.0, 1.0, 3), (image_size, image_size, 3)).astype(np.float32)
        samples.append(
            ImageSample(
                id=f"b{k:06d}",
                pixels=pixels.copy(),
                masks={},
                labels=frozenset(),
                group=(None, None),
                split="train",
                scene=None,
            )
        )
    return samples
