from __future__ import annotations

import dataclasses
import functools
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from context_debias.errors import ConfigError, SchemaError
from context_debias.layout import pick, place_poses
from context_debias.scenegen import SPLITS, Dataset, ImageSample, SceneSpec, render_scene
from context_debias.schema import CategorySchema
from context_debias.seeding import derive_seed, numpy_rng
from context_debias.workers import run_bounded_sync

LOGGER = logging.getLogger("context-debias")


@dataclass(frozen=True)
class DatasetConfig:
    num_object_classes: int
    num_context_classes: int
    num_backgrounds: int
    images_per_class: int
    bias_ratio: float
    image_size: int
    seed: int
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    mode: str = "multi_label"
    # Probability that an exclusive image of a biased object still shows some other context.
    alt_context_rate: float = 0.5
    unbiased_context_rate: float = 0.5
    secondary_context_rate: float = 0.35

    def validate(self) -> None:
        if min(self.num_object_classes, self.num_backgrounds, self.images_per_class) <= 0:
            raise ConfigError("Dataset counts must be positive")
        if self.mode == "multi_label" and self.num_context_classes <= 0:
            raise ConfigError("multi_label datasets need at least one context class")
        if self.mode not in {"multi_label", "single_label"}:
            raise ConfigError(f"Unknown dataset mode={self.mode}")
        if not 0.0 <= self.bias_ratio <= 1.0:
            raise ConfigError(f"bias_ratio out of range value={self.bias_ratio}")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        fractions = self.split_fractions
        if len(fractions) != len(SPLITS) or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-6:
            raise ConfigError("split_fractions must be three positive reals summing to 1")
        for rate in (self.alt_context_rate, self.unbiased_context_rate, self.secondary_context_rate):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError("context rates must lie in [0,1]")


def _split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    n_train = round(n * fractions[0])
    n_val = round(n * fractions[1])
    return [n_train, n_val, n - n_train - n_val]


def _check_schema_counts(config: DatasetConfig, schema: CategorySchema) -> None:
    expected = {
        "objects": (config.num_object_classes, len(schema.object_classes)),
        "backgrounds": (config.num_backgrounds, len(schema.background_classes)),
    }
    if config.mode == "multi_label":
        expected["contexts"] = (config.num_context_classes, len(schema.context_classes))
    for name, (want, have) in expected.items():
        if want != have:
            raise SchemaError(f"Schema {name} count {have} does not match config {want}")


def synth_dataset(config: DatasetConfig, schema: CategorySchema, *, workers: int = 1) -> Dataset:
    """Build the biased synthetic dataset.

    For every designated pair (b, c) and every split, exactly round(rho * n_split) images of b
    show c, so the empirical train ratio differs from rho only by rounding.
    """
    config.validate()
    schema.validate()
    _check_schema_counts(config, schema)
    rho_by_object = {
        p.biased: (p.context, config.bias_ratio if p.rho is None else p.rho) for p in schema.designated_pairs
    }

    split_rng = numpy_rng(config.seed, "splits")
    jobs: list[tuple[str, str, SceneSpec]] = []
    counter = 0
    total = len(schema.object_classes) * config.images_per_class
    width = max(6, len(str(total - 1)))

    for obj in schema.object_classes:
        n = config.images_per_class
        sizes = _split_sizes(n, config.split_fractions)
        split_of = np.repeat(np.arange(len(SPLITS)), sizes)
        split_rng.shuffle(split_of)
        with_context = np.zeros(n, dtype=bool)
        designated, rho = rho_by_object.get(obj, (None, 0.0))
        if designated is not None:
            for split_idx in range(len(SPLITS)):
                members = np.flatnonzero(split_of == split_idx)
                flags = np.zeros(len(members), dtype=bool)
                flags[: round(rho * len(members))] = True
                split_rng.shuffle(flags)
                with_context[members] = flags

        for k in range(n):
            rng = numpy_rng(config.seed, "layout", counter)
            spec = _scene_for(
                rng,
                schema,
                config,
                obj=obj,
                designated=designated,
                cooccur=bool(with_context[k]),
                seed=derive_seed(config.seed, "image", counter),
            )
            jobs.append((str(counter).zfill(width), SPLITS[int(split_of[k])], spec))
            counter += 1

    def _render(image_id: str, split: str, spec: SceneSpec) -> ImageSample:
        sample = render_scene(spec, schema)
        group = (
            (spec.biased_object, spec.background)
            if config.mode == "single_label"
            else (spec.biased_object, spec.context_object)
        )
        return dataclasses.replace(sample, id=image_id, split=split, group=group)

    samples = run_bounded_sync(
        [functools.partial(_render, image_id, split, spec) for image_id, split, spec in jobs],
        workers=workers,
    )
    LOGGER.info(
        "Synthesized dataset images=%s mode=%s designated_pairs=%s seed=%s",
        len(samples),
        config.mode,
        len(rho_by_object),
        config.seed,
    )
    return Dataset(schema=schema, samples=tuple(samples), mode=config.mode, image_size=config.image_size)


def _scene_for(
    rng: np.random.Generator,
    schema: CategorySchema,
    config: DatasetConfig,
    *,
    obj: str,
    designated: str | None,
    cooccur: bool,
    seed: int,
) -> SceneSpec:
    backgrounds = schema.background_classes
    if config.mode == "single_label":
        if designated is None:
            background = pick(rng, backgrounds)
        elif cooccur:
            background = designated
        else:
            background = pick(rng, [bg for bg in backgrounds if bg != designated])
        poses = place_poses(rng, config.image_size, obj=obj, ctx=None, secondary=None)
        return SceneSpec(obj, None, background, poses, seed, None, config.image_size)

    contexts = schema.context_classes
    ctx: str | None = None
    if designated is not None:
        if cooccur:
            ctx = designated
        elif rng.random() < config.alt_context_rate:
            others = [c for c in contexts if c != designated]
            ctx = pick(rng, others) if others else None
    elif rng.random() < config.unbiased_context_rate:
        ctx = pick(rng, contexts)

    secondary: str | None = None
    if rng.random() < config.secondary_context_rate:
        candidates = [c for c in contexts if c not in {ctx, designated}]
        if candidates:
            secondary = pick(rng, candidates)

    background = pick(rng, backgrounds)
    poses = place_poses(rng, config.image_size, obj=obj, ctx=ctx, secondary=secondary)
    return SceneSpec(obj, ctx, background, poses, seed, secondary, config.image_size)
