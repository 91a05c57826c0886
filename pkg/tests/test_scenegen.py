from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from context_debias.dataset import load_dataset, save_dataset
from context_debias.errors import PreconditionError, ProvenanceError, SchemaError
from context_debias.glyphs import Pose, glyph_area
from context_debias.layout import synth_unbiased
from context_debias.oracle import grammar_oracle_edit
from context_debias.scenegen import ImageSample, SceneSpec, render_scene
from context_debias.schema import default_schema
from context_debias.synth import DatasetConfig, synth_dataset


def _config(**overrides: object) -> DatasetConfig:
    base: dict[str, object] = {
        "num_object_classes": 8,
        "num_context_classes": 4,
        "num_backgrounds": 4,
        "images_per_class": 20,
        "bias_ratio": 0.9,
        "image_size": 32,
        "seed": 3,
    }
    base.update(overrides)
    return DatasetConfig(**base)  # type: ignore[arg-type]


def _scene(**overrides: object) -> SceneSpec:
    base: dict[str, object] = {
        "biased_object": "handbag",
        "context_object": "person",
        "background": "snow",
        "object_poses": (("person", Pose(10.0, 18.0, 12.0)), ("handbag", Pose(22.0, 20.0, 10.0))),
        "seed": 11,
    }
    base.update(overrides)
    return SceneSpec(**base)  # type: ignore[arg-type]


def test_render_scene_is_bit_identical_and_labels_match() -> None:
    schema = default_schema()
    a = render_scene(_scene(), schema)
    b = render_scene(_scene(), schema)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.labels == frozenset({"handbag", "person", "snow"})
    assert a.pixels.dtype == np.float32
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


def test_masks_tile_the_canvas_without_overlap() -> None:
    sample = render_scene(_scene(), default_schema())
    stacked = np.stack([m.astype(np.int32) for m in sample.masks.values()])
    assert (stacked.sum(axis=0) == 1).all()


def test_empty_scene_has_only_background() -> None:
    sample = render_scene(_scene(biased_object=None, context_object=None, object_poses=()), default_schema())
    assert sample.labels == frozenset({"snow"})
    assert not sample.foreground_union.any()


def test_mask_area_matches_analytic_glyph_area() -> None:
    schema = default_schema()
    spec = _scene(context_object=None, object_poses=(("handbag", Pose(16.0, 16.0, 20.0)),))
    sample = render_scene(spec, schema)
    expected = glyph_area(schema.appearance["handbag"].shape, 20.0)
    # Pixel-center sampling error grows with the perimeter.
    assert abs(int(sample.masks["handbag"].sum()) - expected) <= 0.05 * expected + 1


def test_unknown_category_is_a_schema_error() -> None:
    with pytest.raises(SchemaError, match="Unknown category"):
        render_scene(_scene(biased_object="unicorn", object_poses=(("unicorn", Pose(16.0, 16.0, 8.0)),)), default_schema())


@pytest.mark.parametrize(("rho", "expected"), [(1.0, 1.0), (0.0, 0.0)])
def test_bias_ratio_boundaries(rho: float, expected: float) -> None:
    dataset = synth_dataset(_config(bias_ratio=rho), default_schema())
    train = dataset.split("train")
    with_b = [s for s in train if "handbag" in s.labels]
    assert with_b
    assert sum("person" in s.labels for s in with_b) / len(with_b) == expected


def test_bias_ratio_is_exact_per_split() -> None:
    dataset = synth_dataset(_config(images_per_class=500, seed=0), default_schema())
    with_b = [s for s in dataset.samples if "handbag" in s.labels]
    assert len(with_b) == 500
    assert abs(sum("person" in s.labels for s in with_b) - 450) <= 10
    train = [s for s in with_b if s.split == "train"]
    assert abs(sum("person" in s.labels for s in train) / len(train) - 0.9) <= 0.02


def test_synth_dataset_is_deterministic_across_worker_counts() -> None:
    schema = default_schema()
    a = synth_dataset(_config(), schema, workers=1)
    b = synth_dataset(_config(), schema, workers=3)
    assert [s.id for s in a.samples] == [s.id for s in b.samples]
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.samples, b.samples, strict=True))


def test_oracle_removal_and_replacement_labels() -> None:
    schema = default_schema()
    source = render_scene(_scene(), schema)
    removed = grammar_oracle_edit(source, "removal", schema=schema)
    assert removed.labels == frozenset({"handbag", "snow"})
    replaced = grammar_oracle_edit(source, "replacement", "dog", schema=schema)
    assert replaced.labels == frozenset({"handbag", "dog", "snow"})


def test_oracle_removal_keeps_object_color() -> None:
    schema = default_schema()
    source = render_scene(_scene(), schema)
    removed = grammar_oracle_edit(source, "removal", schema=schema)
    before = source.pixels[source.masks["handbag"]].mean(axis=0)
    after = removed.pixels[removed.masks["handbag"]].mean(axis=0)
    assert np.abs(before - after).max() < 0.03


def test_oracle_edit_needs_scene_and_replacement_rule() -> None:
    schema = default_schema()
    source = render_scene(_scene(), schema)
    bare = ImageSample("x", source.pixels, source.masks, source.labels, source.group, "train", scene=None)
    with pytest.raises(ProvenanceError):
        grammar_oracle_edit(bare, "removal", schema=schema)
    with pytest.raises(PreconditionError, match="replacement is required"):
        grammar_oracle_edit(source, "replacement", schema=schema)


def test_single_label_background_swap() -> None:
    schema = default_schema("single_label")
    spec = _scene(context_object=None, object_poses=(("handbag", Pose(16.0, 16.0, 12.0)),), background="grass")
    source = render_scene(spec, schema)
    edited = grammar_oracle_edit(source, "replacement", "sand", schema=schema, context="grass")
    assert edited.labels == frozenset({"handbag", "sand"})
    assert edited.group == ("handbag", "sand")


def test_unbiased_scenes_include_blank_negatives() -> None:
    samples = synth_unbiased(default_schema(), n=40, seed=1, image_size=16, blank_fraction=0.1)
    blanks = [s for s in samples if not s.labels]
    assert len(samples) == 40
    assert len(blanks) == 4


def test_dataset_round_trip_keeps_scene_and_masks(tmp_path: Path) -> None:
    dataset = synth_dataset(_config(images_per_class=5, image_size=16), default_schema())
    save_dataset(dataset, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    original = dataset.by_id()
    for sample in loaded.samples:
        ref = original[sample.id]
        assert sample.labels == ref.labels
        assert sample.scene == ref.scene
        assert set(sample.masks) == set(ref.masks)
        assert np.abs(sample.pixels - ref.pixels).max() <= 1.0 / 255.0 + 1e-6


def test_fully_occluded_secondary_context_carries_no_label() -> None:
    schema = default_schema()
    spec = _scene(
        secondary_context="dog",
        object_poses=(
            ("dog", Pose(16.0, 20.0, 2.0)),
            ("person", Pose(16.0, 20.0, 20.0)),
            ("handbag", Pose(26.0, 20.0, 8.0)),
        ),
    )
    sample = render_scene(spec, schema)
    assert "dog" not in sample.labels
    assert "dog" not in sample.masks
    assert sample.labels == frozenset({"handbag", "person", "snow"})


def test_synthesized_labels_always_have_visible_pixels() -> None:
    dataset = synth_dataset(_config(secondary_context_rate=1.0), default_schema())
    for sample in dataset.samples:
        for label in sample.labels:
            assert sample.masks[label].any(), f"id={sample.id} label={label}"
