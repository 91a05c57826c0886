from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import asdict
from pathlib import Path

from context_debias import __version__
from context_debias.bias_audit import BiasPair
from context_debias.classifier import TrainedClassifier, load_classifier, save_classifier, train_classifier
from context_debias.compare import fmt_value, render_template
from context_debias.cooccurrence import cooccur_conditional, newly_introduced_pairs
from context_debias.edit_requests import GenerationRecord
from context_debias.embedding import EmbeddingProjection, embedding_projection, load_projection, save_projection
from context_debias.errors import InsufficientDataError
from context_debias.generation_io import read_generations
from context_debias.metrics import build_subsets, metric_suite, pair_bias_scores
from context_debias.metrics_report import METRIC_KEYS, MetricsReport, read_report, write_report
from context_debias.plots import bias_score_bars, cooccur_heatmap, embedding_scatter
from context_debias.predictions import write_predictions
from context_debias.scenegen import Dataset, ImageSample
from context_debias.selection import augmentation_samples, rebalance_real
from context_debias.settings import MethodSettings
from context_debias.stage_context import (
    StageContext,
    classifier_categories,
    classifier_config,
    context_classes,
    cooccur_counts,
    eval_classes,
    generated_methods,
    load_run_dataset,
    load_run_pairs,
    write_json,
)
from context_debias.verify import apply_annotations

LOGGER = logging.getLogger("context-debias")


def _selected_records(
    ctx: StageContext, method: MethodSettings, records: Sequence[GenerationRecord]
) -> list[GenerationRecord]:
    raw = json.loads((ctx.stage_dir("verify") / f"selection_{method.name}.json").read_text(encoding="utf-8"))
    wanted = set(raw.get("generated_ids") or [])
    return [r for r in records if r.request.request_id in wanted]


def _augmentation(
    ctx: StageContext,
    method: MethodSettings,
    train: Sequence[ImageSample],
    pairs: Sequence[BiasPair],
    records: Sequence[GenerationRecord],
) -> list[ImageSample]:
    if method.kind == "standard":
        return []
    if method.kind == "real_cooccur":
        counts = cooccur_counts(train, pairs)
        return rebalance_real(train, list(counts), counts, seed=ctx.seed)
    return augmentation_samples(_selected_records(ctx, method, records), single_object=ctx.single_object)


def _embedding(
    ctx: StageContext,
    model: TrainedClassifier,
    dataset: Dataset,
    pairs: Sequence[BiasPair],
    records: Sequence[GenerationRecord],
) -> EmbeddingProjection | None:
    train = dataset.split("train")
    populations: dict[str, list[ImageSample]] = {
        "real_exclusive": [s for s in train if any(p.biased in s.labels and p.context not in s.labels for p in pairs)],
        "real_cooccur": [s for s in train if any(p.biased in s.labels and p.context in s.labels for p in pairs)],
    }
    for backend in ctx.config.backends():
        produced = [r for r in records if r.request.backend == backend and r.ok]
        populations[backend] = augmentation_samples(produced, single_object=ctx.single_object)
    try:
        return embedding_projection(model, dataset.split("val"), populations)
    except InsufficientDataError as exc:
        LOGGER.warning("Skipping embedding projection error=%s", exc)
        return None


def run_evaluate(ctx: StageContext, out: Path) -> None:
    e = ctx.config.evaluation
    dataset = load_run_dataset(ctx)
    schema = dataset.schema
    train, test = dataset.split("train"), dataset.split("test")
    pairs, second = load_run_pairs(ctx)
    contexts = context_classes(schema, ctx.mode)
    train_labels = dataset.label_sets("train")
    before = cooccur_conditional(train_labels, biased=schema.object_classes, contexts=contexts)
    test_labels = dataset.label_sets("test")
    subsets = build_subsets(
        test_labels,
        pairs,
        classes=eval_classes(schema, ctx.mode),
        groups=dataset.groups("test"),
        min_group_count=e.min_group_count,
    )

    records: list[GenerationRecord] = []
    annotations = ctx.stage_dir("verify") / "annotations.jsonl"
    if generated_methods(ctx.config) or (e.embedding and ctx.config.backends()):
        records = read_generations(ctx.stage_dir("generate") / "generations")
        apply_annotations(records, annotations)

    standard = load_classifier(ctx.stage_dir("train-classifier") / "standard.pt")
    projection = _embedding(ctx, standard, dataset, pairs, records) if e.embedding else None
    if projection is not None:
        save_projection(projection, out / "embedding.json", out / "embedding.npz")

    for method in ctx.config.methods:
        extra = _augmentation(ctx, method, train, pairs, records)
        if method.kind == "standard":
            model = standard
        else:
            categories = classifier_categories(schema, ctx.mode)
            model, _ = train_classifier([*train, *extra], categories, classifier_config(ctx))
            save_classifier(model, out / f"classifier_{method.name}.pt")
        preds = model.predict_table(test)
        write_predictions(preds, out / f"predictions_test_{method.name}.csv")
        report = metric_suite(
            preds,
            test_labels,
            subsets,
            method=method.name,
            object_classes=schema.object_classes,
            min_group_count=e.min_group_count,
        )
        after = cooccur_conditional(
            {**train_labels, **{s.id: s.labels for s in extra}},
            biased=schema.object_classes,
            contexts=contexts,
        )
        report.bias_scores = pair_bias_scores(preds, test_labels, pairs, second)
        report.cooccur_before = before.to_dict()
        report.cooccur_after = after.to_dict()
        introduced = newly_introduced_pairs(before, after, threshold=ctx.config.audit.new_pair_threshold)
        report.new_pairs = [asdict(p) for p in introduced]
        report.embedding = projection.to_dict() if projection is not None else None
        report.metadata = {
            "kind": method.kind,
            "backend": method.backend,
            "seed": ctx.seed,
            "config_hash": ctx.run_dir.name,
            "train_images": len(train),
            "augmented_images": len(extra),
            "tool_version": __version__,
        }
        write_report(report, out / f"metrics_{method.name}.json", out / f"per_class_{method.name}.csv")
        LOGGER.info(
            "Method evaluated method=%s exclusive_map=%s cooccur_map=%s augmented=%s",
            method.name,
            fmt_value(report.exclusive_map),
            fmt_value(report.cooccur_map),
            len(extra),
        )


def run_report(ctx: StageContext, out: Path) -> None:
    evaluate_dir = ctx.stage_dir("evaluate")
    reports: dict[str, MetricsReport] = {
        m.name: read_report(evaluate_dir / f"metrics_{m.name}.json") for m in ctx.config.methods
    }
    pairs, second = load_run_pairs(ctx)
    baseline = next(reports[m.name] for m in ctx.config.methods if m.kind == "standard")
    augmented = next((reports[m.name] for m in ctx.config.methods if m.kind != "standard"), None)

    pair_rows = [{**p.to_dict(), "second": second[p.biased].context if second.get(p.biased) else None} for p in pairs]
    payload = {
        "config_hash": ctx.run_dir.name,
        "seed": ctx.seed,
        "pairs": pair_rows,
        "metrics": {name: {k: r.metric(k) for k in METRIC_KEYS} for name, r in reports.items()},
        "bias_scores": {name: r.bias_scores for name, r in reports.items()},
        "new_pairs": {name: r.new_pairs for name, r in reports.items()},
        "embedding": baseline.embedding,
    }
    write_json(out / "report.json", payload)
    write_json(out / "new_pairs.json", payload["new_pairs"])
    md = render_template("report.md.j2", mode=ctx.mode, metric_keys=METRIC_KEYS, fmt=fmt_value, **payload)
    (out / "report.md").write_text(md, encoding="utf-8")

    if baseline.cooccur_before is not None:
        after = augmented.cooccur_after if augmented else None
        cooccur_heatmap(baseline.cooccur_before, after, out / "cooccur_heatmap.png")
    bias_score_bars(baseline.bias_scores, out / "bias_scores.png")
    if (evaluate_dir / "embedding.npz").exists():
        projection = load_projection(evaluate_dir / "embedding.json", evaluate_dir / "embedding.npz")
        embedding_scatter(projection, out / "embedding_scatter.png")
