from __future__ import annotations

import argparse
import logging
import os
from collections.abc import Sequence
from pathlib import Path

import torch

from context_debias.compare import compare_run_dirs, write_comparison
from context_debias.errors import ConfigError
from context_debias.manifest import STAGES
from context_debias.settings import DEFAULT_CONFIG, ExperimentConfig, RuntimeSettings, config_hash, load_experiment
from context_debias.stage_context import open_context
from context_debias.stages import LOG_FORMAT, prepare_run, run_all, run_stage

LOGGER = logging.getLogger("context-debias")

STAGE_HELP = {
    "synth-data": "Render the biased synthetic dataset",
    "train-annotator": "Train the multi-label annotator on unbiased scenes",
    "train-classifier": "Train the standard classifier and store its predictions",
    "audit-bias": "Score candidate pairs and identify biased ones",
    "train-diffusion": "Train the base text-to-image denoiser",
    "personalize": "Learn per-image tokens for the cooccur source images",
    "generate": "Produce removal and replacement edits per backend",
    "verify": "Annotate generations and select the augmentation sets",
    "evaluate": "Train augmented classifiers and compute metrics",
    "report": "Write report.json, report.md and plots",
}


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(DEFAULT_CONFIG), help="Path to YAML experiment config")
    common.add_argument("--seed", type=int, default=None, help="Run a single seed (default: every configured seed)")
    common.add_argument("--workers", type=_positive_int, default=None, help="Bounded worker count for per-image jobs")
    common.add_argument("--resume", action="store_true", help="Keep finished stages of an existing run")
    common.add_argument("--force", action="store_true", help="Rerun stages even when they are up to date")
    common.add_argument(
        "--log-level",
        default=os.getenv("LOG_LEVEL", "INFO"),
        help="Logging level (INFO, WARNING, ...)",
    )

    parser = argparse.ArgumentParser(
        prog="context-debias", description="Contextual debiasing with per-image generated augmentations"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=STAGE_HELP[name])
    sub.add_parser("run-all", parents=[common], help="Run every stage, then compare seeds")
    compare = sub.add_parser("compare", parents=[common], help="Aggregate evaluated runs over seeds")
    compare.add_argument("runs", nargs="*", type=Path, help="Run directories (default: the config's runs)")
    compare.add_argument("--out", type=Path, default=None, help="Output directory for comparison files")
    return parser


def _configure_torch(threads: int) -> None:
    torch.use_deterministic_algorithms(True)
    if threads > 0:
        torch.set_num_threads(threads)


def _comparison_dir(config: ExperimentConfig, output_root: Path) -> Path:
    return output_root / f"comparison-{config_hash(config)}"


def _dispatch(args: argparse.Namespace, config: ExperimentConfig, output_root: Path, workers: int) -> None:
    seeds = [int(args.seed)] if args.seed is not None else list(config.seeds)
    contexts = [open_context(config, seed, output_root=output_root, workers=workers) for seed in seeds]

    if args.command == "compare":
        run_dirs = list(args.runs) or [ctx.run_dir for ctx in contexts]
        write_comparison(compare_run_dirs(run_dirs), args.out or _comparison_dir(config, output_root))
        return

    if args.command == "run-all":
        for ctx in contexts:
            run_all(ctx, resume=bool(args.resume), force=bool(args.force))
        if len(contexts) > 1:
            write_comparison(compare_run_dirs([ctx.run_dir for ctx in contexts]), _comparison_dir(config, output_root))
        return

    for ctx in contexts:
        manifest = prepare_run(ctx, resume=True)
        run_stage(args.command, ctx, manifest, force=bool(args.force))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format=LOG_FORMAT,
    )
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)

    runtime = RuntimeSettings()
    try:
        config = load_experiment(Path(args.config))
    except ConfigError as exc:
        LOGGER.error("Configuration error error=%s", exc)
        return 2
    output_root = Path(runtime.output_root or config.output_root)
    workers = int(args.workers) if args.workers is not None else max(1, runtime.workers)
    _configure_torch(runtime.torch_threads)

    try:
        _dispatch(args, config, output_root, workers)
    except ConfigError as exc:
        LOGGER.error("Configuration error command=%s error=%s", args.command, exc)
        return 2
    except Exception as exc:
        LOGGER.error("Command failed command=%s error=%s: %s", args.command, type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
