from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from context_debias.errors import SchemaError
from context_debias.scenegen import Dataset, ImageSample, SceneSpec
from context_debias.schema import load_schema, save_schema

LOGGER = logging.getLogger("context-debias")


def write_png(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def _write_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def sample_record(sample: ImageSample) -> dict[str, Any]:
    return {
        "id": sample.id,
        "labels": sorted(sample.labels),
        "group": list(sample.group),
        "split": sample.split,
        "scene": sample.scene.to_dict() if sample.scene is not None else None,
    }


def save_dataset(dataset: Dataset, root: Path) -> None:
    """Write ``images/``, ``masks/``, ``labels.jsonl``, ``schema.json`` and ``dataset.json`` under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    save_schema(dataset.schema, root / "schema.json")
    lines: list[str] = []
    for sample in sorted(dataset.samples, key=lambda s: s.id):
        write_png(root / "images" / f"{sample.id}.png", sample.pixels)
        for category, mask in sorted(sample.masks.items()):
            _write_mask(root / "masks" / sample.id / f"{category}.png", mask)
        lines.append(json.dumps(sample_record(sample), ensure_ascii=False, sort_keys=True))
    (root / "labels.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"mode": dataset.mode, "image_size": dataset.image_size, "count": len(dataset.samples)}
    (root / "dataset.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
    LOGGER.info("Saved dataset path=%s images=%s", root, len(dataset.samples))


def load_dataset(root: Path, *, with_masks: bool = True) -> Dataset:
    schema = load_schema(root / "schema.json")
    try:
        meta = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
        raw_lines = (root / "labels.jsonl").read_text(encoding="utf-8").splitlines()
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"Unreadable dataset path={root} error={exc}") from exc

    samples: list[ImageSample] = []
    for line in raw_lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        sample_id = str(rec["id"])
        labels = frozenset(str(x) for x in rec.get("labels") or [])
        masks: dict[str, np.ndarray] = {}
        if with_masks:
            for category in sorted(labels):
                mask_path = root / "masks" / sample_id / f"{category}.png"
                if mask_path.exists():
                    masks[category] = _read_mask(mask_path)
        group = rec.get("group") or [None, None]
        scene_raw = rec.get("scene")
        samples.append(
            ImageSample(
                id=sample_id,
                pixels=read_png(root / "images" / f"{sample_id}.png"),
                masks=masks,
                labels=labels,
                group=(group[0], group[1]),
                split=str(rec["split"]),
                scene=SceneSpec.from_dict(scene_raw) if isinstance(scene_raw, dict) else None,
            )
        )
    return Dataset(
        schema=schema,
        samples=tuple(samples),
        mode=str(meta.get("mode") or "multi_label"),
        image_size=int(meta.get("image_size") or 32),
    )
