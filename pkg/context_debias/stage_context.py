"""Run context shared by every stage runner plus the run-directory readers they use."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from context_debias.bias_audit import BiasPair, read_bias_pairs
from context_debias.classifier import ClassifierConfig
from context_debias.dataset import load_dataset
from context_debias.edit_requests import pick_sources
from context_debias.scenegen import Dataset, ImageSample
from context_debias.schema import CategorySchema, default_schema, load_schema
from context_debias.seeding import derive_seed
from context_debias.selection import SelectionStats
from context_debias.settings import ExperimentConfig, MethodSettings, config_hash

LOGGER = logging.getLogger("context-debias")


@dataclass(frozen=True)
class StageContext:
    config: ExperimentConfig
    seed: int
    run_dir: Path
    workers: int = 1

    @property
    def mode(self) -> str:
        return self.config.dataset.mode

    @property
    def single_object(self) -> bool:
        return self.mode == "single_label"

    def stage_dir(self, name: str) -> Path:
        return self.run_dir / name


def open_context(config: ExperimentConfig, seed: int, *, output_root: Path, workers: int = 1) -> StageContext:
    return StageContext(config=config, seed=int(seed), run_dir=output_root / config_hash(config, seed), workers=workers)


def context_classes(schema: CategorySchema, mode: str) -> tuple[str, ...]:
    """Categories a biased object can co-occur with: contexts, or backgrounds for single-object scenes."""
    return schema.background_classes if mode == "single_label" else schema.context_classes


def classifier_categories(schema: CategorySchema, mode: str) -> tuple[str, ...]:
    return schema.object_classes if mode == "single_label" else schema.categories


def eval_classes(schema: CategorySchema, mode: str) -> tuple[str, ...]:
    return schema.object_classes if mode == "single_label" else (*schema.object_classes, *schema.context_classes)


# context-debias-allow-vague-signature
def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, ensure_ascii=True, allow_nan=False, sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def write_loss(path: Path, trace: Sequence[float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(trace):
            writer.writerow([i, repr(float(value))])


def initial_schema(ctx: StageContext) -> CategorySchema:
    path = ctx.config.schema_path
    return load_schema(Path(path)) if path is not None else default_schema(ctx.mode)


def load_run_dataset(ctx: StageContext, *, with_masks: bool = False) -> Dataset:
    return load_dataset(ctx.stage_dir("synth-data") / "dataset", with_masks=with_masks)


def load_run_schema(ctx: StageContext) -> CategorySchema:
    return load_schema(ctx.stage_dir("synth-data") / "dataset" / "schema.json")


def load_run_pairs(ctx: StageContext) -> tuple[list[BiasPair], dict[str, BiasPair | None]]:
    return read_bias_pairs(ctx.stage_dir("audit-bias") / "bias_report.json")


def classifier_config(ctx: StageContext) -> ClassifierConfig:
    c = ctx.config.classifier
    return ClassifierConfig(
        mode=ctx.mode,
        epochs=c.epochs,
        batch_size=c.batch_size,
        lr=c.lr,
        lr_schedule=c.lr_schedule,
        weight_decay=c.weight_decay,
        width=c.width,
        blocks=c.blocks,
        seed=ctx.seed,
    )


def cooccur_counts(train: Iterable[ImageSample], pairs: Iterable[BiasPair]) -> dict[tuple[str, str], int]:
    samples = list(train)
    return {
        (p.biased, p.context): sum(1 for s in samples if p.biased in s.labels and p.context in s.labels)
        for p in pairs
    }


def sources_for(ctx: StageContext, train: Sequence[ImageSample], pair: BiasPair, backend: str) -> list[ImageSample]:
    """Cooccur training images of ``pair`` used as edit sources, capped per backend."""
    by_id = {s.id: s for s in train if pair.biased in s.labels and pair.context in s.labels}
    cap = ctx.config.generation.max_sources_per_pair.get(backend)
    chosen = pick_sources(list(by_id), cap, seed=derive_seed(ctx.seed, "sources", backend), pair=pair)
    return [by_id[i] for i in chosen]


def skip_stage(out: Path, reason: str) -> None:
    LOGGER.info("Stage skipped reason=%s", reason)
    write_json(out / "skipped.json", {"reason": reason})


def selection_stats(train: Sequence[ImageSample], pairs: Sequence[BiasPair]) -> SelectionStats:
    targeted = {p.biased for p in pairs}
    sizes = Counter(s.group for s in train if s.group[0] in targeted)
    return SelectionStats(cooccur_counts=cooccur_counts(train, pairs), group_sizes=dict(sizes))


def generated_methods(config: ExperimentConfig) -> list[MethodSettings]:
    return [m for m in config.methods if m.kind == "generated"]
