from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from context_debias.classifier import ClassifierConfig, label_targets, load_classifier, save_classifier, train_classifier
from context_debias.embedding import load_projection, project_features, save_projection
from context_debias.errors import CheckpointFormatError, ConfigError, InsufficientDataError, PreconditionError
from context_debias.scenegen import Dataset
from context_debias.schema import default_schema
from context_debias.synth import DatasetConfig, synth_dataset

TINY = ClassifierConfig(epochs=1, batch_size=8, width=4, blocks=1, seed=0)


def _dataset(mode: str = "multi_label") -> Dataset:
    config = DatasetConfig(
        num_object_classes=8,
        num_context_classes=4,
        num_backgrounds=4,
        images_per_class=5,
        bias_ratio=0.8,
        image_size=32,
        seed=0,
        mode=mode,
    )
    return synth_dataset(config, default_schema(mode))


@pytest.mark.parametrize(
    ("change", "message"),
    [
        ({"mode": "ranking"}, "Unknown classifier mode"),
        ({"lr_schedule": "step"}, "Unknown lr_schedule"),
        ({"lr": 0.0}, "out of range"),
        ({"blocks": 5}, "1-4 blocks"),
    ],
)
def test_classifier_config_validation(change: dict[str, object], message: str) -> None:
    with pytest.raises(ConfigError, match=message):
        dataclasses.replace(TINY, **change).validate()


def test_single_label_targets_need_exactly_one_class() -> None:
    dataset = _dataset("single_label")
    objects = dataset.schema.object_classes
    targets = label_targets(dataset.samples, objects, "single_label")
    assert targets.dtype == np.int64
    assert all(objects[t] in s.labels for t, s in zip(targets, dataset.samples, strict=True))

    crowded = dataclasses.replace(dataset.samples[0], labels=frozenset({"handbag", "skis"}))
    with pytest.raises(PreconditionError, match="exactly one class"):
        label_targets([crowded], objects, "single_label")


def test_tiny_classifier_trains_saves_and_reloads(tmp_path: Path) -> None:
    dataset = _dataset()
    categories = (*dataset.schema.object_classes, *dataset.schema.context_classes)
    val = dataset.split("val")
    trained, tables = train_classifier(dataset.split("train"), categories, TINY, eval_sets={"val": val})
    assert trained.loss_trace and all(np.isfinite(trained.loss_trace))
    table = tables["val"]
    assert table.probs.shape == (len(val), len(categories))
    assert ((table.probs >= 0.0) & (table.probs <= 1.0)).all()

    save_classifier(trained, tmp_path / "clf.pt")
    loaded = load_classifier(tmp_path / "clf.pt")
    assert loaded.categories == trained.categories
    assert loaded.loss_trace == pytest.approx(trained.loss_trace)
    np.testing.assert_allclose(loaded.predict_proba(val), trained.predict_proba(val), atol=1e-6)
    assert loaded.features(val).shape == (len(val), 4)

    again, _ = train_classifier(dataset.split("train"), categories, TINY)
    np.testing.assert_allclose(again.predict_proba(val), trained.predict_proba(val), atol=1e-6)

    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointFormatError, match="Unreadable classifier"):
        load_classifier(tmp_path / "junk.pt")


def test_empty_training_set_is_rejected() -> None:
    with pytest.raises(PreconditionError, match="at least one training image"):
        train_classifier([], ("a", "b"), TINY)


def test_projection_distances_are_measured_from_the_reference(tmp_path: Path) -> None:
    rng = np.random.default_rng(0)
    fit = rng.normal(size=(40, 6))
    reference = np.zeros((4, 6))
    shifted = np.zeros((4, 6))
    shifted[:, 0] = 3.0
    populations = {
        "real_exclusive": ([f"r{k}" for k in range(4)], reference),
        "generated": ([f"g{k}" for k in range(4)], shifted),
        "lonely": (["x"], np.ones((1, 6))),
    }
    projection = project_features(fit, populations)
    assert set(projection.coords) == {"real_exclusive", "generated"}
    assert projection.centroid_distance_full["generated"] == pytest.approx(3.0)
    assert projection.centroid_distance_full["real_exclusive"] == 0.0
    assert projection.centroid_distance_2d["generated"] <= 3.0 + 1e-9
    assert projection.coords["generated"].shape == (4, 2)
    assert sum(projection.explained_variance) <= 1.0 + 1e-9

    save_projection(projection, tmp_path / "p.json", tmp_path / "p.npz")
    loaded = load_projection(tmp_path / "p.json", tmp_path / "p.npz")
    assert loaded.ids == projection.ids
    np.testing.assert_allclose(loaded.coords["generated"], projection.coords["generated"])


def test_projection_needs_a_reference_population() -> None:
    fit = np.eye(3)
    with pytest.raises(InsufficientDataError, match="Reference population"):
        project_features(fit, {"generated": (["a", "b"], np.eye(3)[:2])})
    with pytest.raises(InsufficientDataError, match="two fitting"):
        project_features(fit[:1], {"real_exclusive": (["a", "b"], np.eye(3)[:2])})
