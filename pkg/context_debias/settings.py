from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from context_debias.errors import ConfigError

DEFAULT_CONFIG = Path(__file__).with_name("config.yaml")
SMOKE_CONFIG = Path(__file__).with_name("config_smoke.yaml")

Backend = Literal["personalized", "base_txt2img", "grammar_oracle"]


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None:
        return int(default)
    try:
        return int(str(raw).strip())
    except Exception:
        return int(default)


def _env_str(name: str, default: str) -> str:
    raw = os.getenv(name)
    if raw is None:
        return str(default)
    s = str(raw).strip()
    return s if s else str(default)


@dataclass(frozen=True)
class RuntimeSettings:
    log_level: str = field(default_factory=lambda: _env_str("LOG_LEVEL", "INFO"))
    # Empty means "use output_root from the experiment config".
    output_root: str = field(default_factory=lambda: _env_str("CONTEXT_DEBIAS_OUTPUT_ROOT", ""))
    workers: int = field(default_factory=lambda: _env_int("CONTEXT_DEBIAS_WORKERS", 1))
    torch_threads: int = field(default_factory=lambda: _env_int("CONTEXT_DEBIAS_TORCH_THREADS", 0))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSettings(_Strict):
    mode: Literal["multi_label", "single_label"] = "multi_label"
    images_per_class: int = Field(600, ge=10, le=100_000)
    bias_ratio: float = Field(0.9, ge=0.0, le=1.0)
    image_size: int = Field(32, ge=8, le=128)
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    alt_context_rate: float = Field(0.5, ge=0.0, le=1.0)
    unbiased_context_rate: float = Field(0.5, ge=0.0, le=1.0)
    secondary_context_rate: float = Field(0.35, ge=0.0, le=1.0)


class AnnotatorSettings(_Strict):
    n_images: int = Field(5000, ge=20, le=200_000)
    threshold: float = Field(0.5, gt=0.0, lt=1.0)
    blank_fraction: float = Field(0.05, ge=0.0, le=0.5)
    epochs: int = Field(12, ge=0, le=500)
    batch_size: int = Field(64, ge=2, le=4096)
    lr: float = Field(2e-3, gt=0.0)
    width: int = Field(32, ge=4, le=256)


class ClassifierSettings(_Strict):
    epochs: int = Field(15, ge=0, le=500)
    batch_size: int = Field(64, ge=2, le=4096)
    lr: float = Field(2e-3, gt=0.0)
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    weight_decay: float = Field(1e-4, ge=0.0)
    width: int = Field(32, ge=4, le=256)
    blocks: int = Field(3, ge=1, le=4)


class AuditSettings(_Strict):
    threshold: float = Field(1.5, gt=0.0)
    split: Literal["val", "test"] = "val"
    min_count: int = Field(10, ge=1)
    aggregation: Literal["mean", "median"] = "mean"
    new_pair_threshold: float = Field(0.3, gt=0.0, lt=1.0)


class DiffusionSettings(_Strict):
    channels: int = Field(32, ge=4, le=256)
    embed_dim: int = Field(64, ge=4, le=512)
    time_dim: int = Field(64, ge=4, le=512)
    groups: int = Field(8, ge=1, le=32)
    timesteps: int = Field(200, ge=2, le=2000)
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.02, gt=0.0, lt=1.0)
    epochs: int = Field(30, ge=0, le=1000)
    batch_size: int = Field(64, ge=1, le=4096)
    lr: float = Field(2e-4, gt=0.0)
    caption_drop: float = Field(0.3, ge=0.0, le=1.0)
    captions_per_image: int = Field(4, ge=1, le=32)

    @model_validator(mode="after")
    def _betas_increase(self) -> DiffusionSettings:
        if self.beta_end < self.beta_start:
            raise ValueError("beta_end must be >= beta_start")
        return self


class PersonalizationSettings(_Strict):
    lam: float = Field(0.01, ge=0.0)
    token_lr: float = Field(1e-4, gt=0.0)
    model_lr: float = Field(1e-6, gt=0.0)
    iters_phase1: int = Field(300, ge=0)
    iters_phase2: int = Field(300, ge=0)
    t_min: int = Field(0, ge=0)
    t_max: int | None = None
    lora_rank: int = Field(0, ge=0, le=64)
    loss_batch_size: int = Field(8, ge=1, le=64)
    min_mask_area: int = Field(4, ge=0)


class GenerationSettings(_Strict):
    steps: int = Field(200, ge=1, le=2000)
    learned_object: bool = False
    max_sources_per_pair: dict[Backend, int | None] = Field(
        default_factory=lambda: {"personalized": 20, "base_txt2img": 20, "grammar_oracle": None}
    )


class SelectionSettings(_Strict):
    mode: Literal["with_selection", "without_selection"] = "with_selection"
    scheme: Literal["matched_cooccur", "group_balanced", "all_successful"] = "matched_cooccur"
    caps: dict[str, int] = Field(default_factory=dict)


class MethodSettings(_Strict):
    name: str = Field(..., min_length=1, max_length=80, pattern=r"^[A-Za-z0-9_.-]+$")
    kind: Literal["standard", "real_cooccur", "generated"]
    backend: Backend | None = None
    selection: SelectionSettings = Field(default_factory=SelectionSettings)

    @model_validator(mode="after")
    def _backend_iff_generated(self) -> MethodSettings:
        if (self.kind == "generated") != (self.backend is not None):
            raise ValueError(f"method {self.name}: backend is required iff kind=generated")
        return self


class EvaluationSettings(_Strict):
    min_group_count: int = Field(25, ge=1)
    embedding: bool = True


def _default_methods() -> list[MethodSettings]:
    return [
        MethodSettings(name="standard", kind="standard"),
        MethodSettings(name="real_cooccur", kind="real_cooccur"),
        MethodSettings(name="grammar_oracle", kind="generated", backend="grammar_oracle"),
    ]


class ExperimentConfig(_Strict):
    schema_path: str | None = None
    dataset: DatasetSettings = Field(default_factory=DatasetSettings)
    annotator: AnnotatorSettings = Field(default_factory=AnnotatorSettings)
    classifier: ClassifierSettings = Field(default_factory=ClassifierSettings)
    audit: AuditSettings = Field(default_factory=AuditSettings)
    diffusion: DiffusionSettings = Field(default_factory=DiffusionSettings)
    personalization: PersonalizationSettings = Field(default_factory=PersonalizationSettings)
    generation: GenerationSettings = Field(default_factory=GenerationSettings)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)
    methods: list[MethodSettings] = Field(default_factory=_default_methods)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    output_root: str = "runs"

    @model_validator(mode="after")
    def _methods_consistent(self) -> ExperimentConfig:
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ValueError("method names must be unique")
        if "standard" not in {m.kind for m in self.methods}:
            raise ValueError("methods must include a standard baseline")
        if self.generation.steps > self.diffusion.timesteps:
            raise ValueError("generation.steps must not exceed diffusion.timesteps")
        return self

    def backends(self) -> list[str]:
        return sorted({m.backend for m in self.methods if m.backend is not None})

    def method(self, name: str) -> MethodSettings:
        for m in self.methods:
            if m.name == name:
                return m
        raise ConfigError(f"Unknown method name={name}")


def load_config(path: Path) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"Failed to read config path={path} error={exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("Config YAML must be a mapping")
    return data


def load_experiment(path: Path) -> ExperimentConfig:
    raw = load_config(path)
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"Invalid config path={path}: {exc}") from exc
    if config.schema_path is not None:
        schema_path = Path(config.schema_path)
        if not schema_path.is_absolute():
            schema_path = (Path(path).parent / schema_path).resolve()
        if not schema_path.exists():
            raise ConfigError(f"Schema file not found path={schema_path}")
        config = config.model_copy(update={"schema_path": str(schema_path)})
    return config


# context-debias-allow-vague-signature
def canonical_json(payload: Any) -> bytes:
    text = json.dumps(payload, ensure_ascii=True, allow_nan=False, separators=(",", ":"), sort_keys=True)
    return text.encode("utf-8")


def config_hash(config: ExperimentConfig, seed: int | None = None) -> str:
    """sha256 of the canonical config with the active seed, truncated for directory names."""
    dump = config.model_dump(mode="json")
    dump.pop("output_root", None)
    if seed is not None:
        dump["seeds"] = [int(seed)]
    return hashlib.sha256(canonical_json(dump)).hexdigest()[:16]
