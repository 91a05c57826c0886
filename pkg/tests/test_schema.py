from __future__ import annotations

import dataclasses
from pathlib import Path

import pytest

from context_debias.errors import SchemaError
from context_debias.schema import DesignatedPair, default_schema, load_schema, save_schema


@pytest.mark.parametrize("mode", ["multi_label", "single_label"])
def test_default_schemas_validate(mode: str) -> None:
    schema = default_schema(mode)
    schema.validate()
    assert len(schema.object_classes) == 8
    assert len(schema.background_classes) == 4
    assert len(schema.designated_pairs) == 4


def test_single_label_schema_uses_backgrounds_as_contexts() -> None:
    schema = default_schema("single_label")
    assert schema.context_classes == ()
    assert schema.designated_context("handbag") == "grass"
    assert schema.replacement_lists["grass"] == ("sand", "snow", "road")


def test_replacements_must_share_a_superclass() -> None:
    schema = default_schema()
    bad = dataclasses.replace(schema, replacement_lists={**schema.replacement_lists, "person": ("table",)})
    with pytest.raises(SchemaError, match="share a superclass"):
        bad.validate()


def test_replacement_list_must_not_contain_its_key() -> None:
    schema = default_schema()
    bad = dataclasses.replace(schema, replacement_lists={"person": ("person",)})
    with pytest.raises(SchemaError, match="its own key"):
        bad.validate()


def test_designated_pairs_are_checked() -> None:
    schema = default_schema()
    twice = dataclasses.replace(schema, designated_pairs=(DesignatedPair("handbag", "person"), DesignatedPair("handbag", "dog")))
    with pytest.raises(SchemaError, match="two designated contexts"):
        twice.validate()
    context_as_object = dataclasses.replace(schema, designated_pairs=(DesignatedPair("person", "dog"),))
    with pytest.raises(SchemaError, match="not an object"):
        context_as_object.validate()
    with pytest.raises(SchemaError, match="rho out of range"):
        dataclasses.replace(schema, designated_pairs=(DesignatedPair("handbag", "person", 1.5),)).validate()


def test_duplicate_category_and_missing_appearance() -> None:
    schema = default_schema()
    with pytest.raises(SchemaError, match="Duplicate"):
        dataclasses.replace(schema, context_classes=(*schema.context_classes, "handbag")).validate()
    appearance = {k: v for k, v in schema.appearance.items() if k != "kite"}
    with pytest.raises(SchemaError, match="Missing appearance id=kite"):
        dataclasses.replace(schema, appearance=appearance).validate()


def test_schema_file_round_trip(tmp_path: Path) -> None:
    schema = default_schema()
    save_schema(schema, tmp_path / "schema.json")
    loaded = load_schema(tmp_path / "schema.json")
    assert loaded.to_dict() == schema.to_dict()
    (tmp_path / "broken.json").write_text("{}", encoding="utf-8")
    with pytest.raises(SchemaError, match="Malformed schema"):
        load_schema(tmp_path / "broken.json")
