from __future__ import annotations

import logging
from pathlib import Path

from context_debias.bias_audit import (
    BiasPair,
    identify_biased_pairs,
    score_candidates,
    second_context,
    write_bias_report,
)
from context_debias.classifier import ClassifierConfig, save_classifier, train_classifier
from context_debias.cooccurrence import cooccur_conditional
from context_debias.dataset import save_dataset
from context_debias.errors import InsufficientDataError
from context_debias.predictions import read_predictions, write_predictions
from context_debias.seeding import derive_seed
from context_debias.stage_context import (
    StageContext,
    classifier_categories,
    classifier_config,
    context_classes,
    initial_schema,
    load_run_dataset,
    load_run_schema,
    write_json,
    write_loss,
)
from context_debias.synth import DatasetConfig, synth_dataset
from context_debias.verify import save_annotator, train_annotator

LOGGER = logging.getLogger("context-debias")


def run_synth_data(ctx: StageContext, out: Path) -> None:
    settings = ctx.config.dataset
    schema = initial_schema(ctx)
    config = DatasetConfig(
        num_object_classes=len(schema.object_classes),
        num_context_classes=len(schema.context_classes),
        num_backgrounds=len(schema.background_classes),
        images_per_class=settings.images_per_class,
        bias_ratio=settings.bias_ratio,
        image_size=settings.image_size,
        seed=ctx.seed,
        split_fractions=tuple(settings.split_fractions),
        mode=settings.mode,
        alt_context_rate=settings.alt_context_rate,
        unbiased_context_rate=settings.unbiased_context_rate,
        secondary_context_rate=settings.secondary_context_rate,
    )
    dataset = synth_dataset(config, schema, workers=ctx.workers)
    save_dataset(dataset, out / "dataset")
    matrix = cooccur_conditional(
        dataset.label_sets("train"), biased=schema.object_classes, contexts=context_classes(schema, ctx.mode)
    )
    write_json(out / "cooccur_train.json", matrix.to_dict())


def run_train_annotator(ctx: StageContext, out: Path) -> None:
    a = ctx.config.annotator
    config = ClassifierConfig(
        mode="multi_label", epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, width=a.width, seed=ctx.seed
    )
    annotator, accuracy = train_annotator(
        load_run_schema(ctx),
        n_images=a.n_images,
        seed=derive_seed(ctx.seed, "annotator-data"),
        image_size=ctx.config.dataset.image_size,
        config=config,
        threshold=a.threshold,
        blank_fraction=a.blank_fraction,
    )
    save_annotator(annotator, out)
    write_json(out / "annotator.json", {"held_out_exact_set_accuracy": accuracy, "n_images": a.n_images})


def run_train_classifier(ctx: StageContext, out: Path) -> None:
    dataset = load_run_dataset(ctx)
    trained, tables = train_classifier(
        dataset.split("train"),
        classifier_categories(dataset.schema, ctx.mode),
        classifier_config(ctx),
        eval_sets={"val": dataset.split("val"), "test": dataset.split("test")},
    )
    save_classifier(trained, out / "standard.pt")
    for split, table in tables.items():
        write_predictions(table, out / f"predictions_{split}.csv")
    write_loss(out / "loss.csv", trained.loss_trace)


def run_audit_bias(ctx: StageContext, out: Path) -> None:
    a = ctx.config.audit
    dataset = load_run_dataset(ctx)
    schema = dataset.schema
    contexts = context_classes(schema, ctx.mode)
    train_labels = dataset.label_sets("train")
    scores = score_candidates(
        read_predictions(ctx.stage_dir("train-classifier") / f"predictions_{a.split}.csv"),
        dataset.label_sets(a.split),
        objects=schema.object_classes,
        contexts=contexts,
        train_labels=train_labels,
        min_count=a.min_count,
        aggregation=a.aggregation,
    )
    pairs = identify_biased_pairs(scores, a.threshold)
    second: dict[str, BiasPair | None] = {}
    for pair in pairs:
        try:
            second[pair.biased] = second_context(pair.biased, scores)
        except InsufficientDataError as exc:
            LOGGER.warning("No second-highest context biased=%s error=%s", pair.biased, exc)
            second[pair.biased] = None
    if not pairs:
        LOGGER.warning("No biased pair reached the threshold threshold=%s candidates=%s", a.threshold, len(scores))
    write_bias_report(
        out / "bias_report.json",
        pairs=pairs,
        scores=scores,
        second=second,
        cooccur=cooccur_conditional(train_labels, biased=schema.object_classes, contexts=contexts),
        split=a.split,
        threshold=a.threshold,
    )
    LOGGER.info("Bias audit complete pairs=%s", ",".join(f"{p.biased}+{p.context}" for p in pairs) or "none")
