from __future__ import annotations

import logging
import shutil
import time
from collections.abc import Callable
from pathlib import Path

from context_debias.manifest import (
    LOG_NAME,
    STAGES,
    RunManifest,
    StageRecord,
    digest_tree,
    load_manifest,
    save_manifest,
)
from context_debias.stage_context import StageContext, write_json
from context_debias.stage_data import run_audit_bias, run_synth_data, run_train_annotator, run_train_classifier
from context_debias.stage_evaluation import run_evaluate, run_report
from context_debias.stage_generation import run_generate, run_personalize, run_train_diffusion, run_verify

LOGGER = logging.getLogger("context-debias")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
LOG_TAIL_LINES = 50

STAGE_RUNNERS: dict[str, Callable[[StageContext, Path], None]] = {
    "synth-data": run_synth_data,
    "train-annotator": run_train_annotator,
    "train-classifier": run_train_classifier,
    "audit-bias": run_audit_bias,
    "train-diffusion": run_train_diffusion,
    "personalize": run_personalize,
    "generate": run_generate,
    "verify": run_verify,
    "evaluate": run_evaluate,
    "report": run_report,
}


def _log_tail(path: Path, lines: int = LOG_TAIL_LINES) -> list[str]:
    try:
        return path.read_text(encoding="utf-8", errors="replace").splitlines()[-lines:]
    except OSError:
        return []


def run_stage(name: str, ctx: StageContext, manifest: RunManifest, *, force: bool = False) -> RunManifest:
    """Run one stage after checking its upstream statuses and input digests.

    A done stage whose inputs and outputs still match the manifest is left alone unless ``force``.
    """
    manifest.check_upstream(name)
    inputs = manifest.verify_inputs(name, ctx.run_dir)
    out = ctx.stage_dir(name)
    previous = manifest.stage(name)
    if (
        not force
        and previous.status == "done"
        and previous.inputs == inputs
        and digest_tree(out, ctx.run_dir) == previous.outputs
    ):
        LOGGER.info("Stage up to date stage=%s", name)
        return manifest

    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    record = StageRecord(status="running", inputs=inputs, started_at=time.time())
    manifest.stages[name] = record
    save_manifest(manifest, ctx.run_dir)

    handler = logging.FileHandler(out / LOG_NAME, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    LOGGER.addHandler(handler)
    started = time.monotonic()
    LOGGER.info("Stage start stage=%s seed=%s run=%s", name, ctx.seed, ctx.run_dir)
    try:
        STAGE_RUNNERS[name](ctx, out)
    except Exception as exc:
        LOGGER.exception("Stage failed stage=%s", name)
        handler.flush()
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        record.duration_seconds = round(time.monotonic() - started, 3)
        record.log_tail = _log_tail(out / LOG_NAME)
        save_manifest(manifest, ctx.run_dir)
        raise
    finally:
        LOGGER.removeHandler(handler)
        handler.close()

    record.status = "done"
    record.outputs = digest_tree(out, ctx.run_dir)
    record.duration_seconds = round(time.monotonic() - started, 3)
    save_manifest(manifest, ctx.run_dir)
    LOGGER.info(
        "Stage complete stage=%s elapsed_seconds=%.1f outputs=%s", name, record.duration_seconds, len(record.outputs)
    )
    return manifest


def prepare_run(ctx: StageContext, *, resume: bool = True) -> RunManifest:
    """Load (or start) the run manifest and record the config the run was made with."""
    digest = ctx.run_dir.name
    manifest = load_manifest(ctx.run_dir, config_hash=digest, seed=ctx.seed)
    if not resume:
        manifest.reset()
    payload = {"config": ctx.config.model_dump(mode="json"), "seed": ctx.seed, "config_hash": digest}
    write_json(ctx.run_dir / "config.json", payload)
    save_manifest(manifest, ctx.run_dir)
    return manifest


def run_all(ctx: StageContext, *, resume: bool = False, force: bool = False) -> RunManifest:
    manifest = prepare_run(ctx, resume=resume)
    for name in STAGES:
        run_stage(name, ctx, manifest, force=force)
    LOGGER.info("Run complete run=%s seed=%s", ctx.run_dir, ctx.seed)
    return manifest
