from __future__ import annotations

import json
from pathlib import Path

import pytest

from context_debias.errors import ConfigError
from context_debias.main import main
from context_debias.personalize import PersonalizationConfig
from context_debias.settings import (
    DEFAULT_CONFIG,
    SMOKE_CONFIG,
    ExperimentConfig,
    RuntimeSettings,
    config_hash,
    load_experiment,
)


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def test_reference_config_loads() -> None:
    config = load_experiment(DEFAULT_CONFIG)
    names = [m.name for m in config.methods]
    assert names[0] == "standard"
    assert {"real_cooccur", "grammar_oracle", "base_txt2img", "personalized"} <= set(names)
    assert config.backends() == ["base_txt2img", "grammar_oracle", "personalized"]
    assert config.seeds == [0, 1, 2]


def test_reference_personalization_uses_the_documented_schedule() -> None:
    p = load_experiment(DEFAULT_CONFIG).personalization
    defaults = PersonalizationConfig()
    assert (p.iters_phase1, p.iters_phase2) == (300, 300)
    assert p.token_lr == pytest.approx(1e-4)
    assert p.model_lr == pytest.approx(1e-6)
    assert p.lam == pytest.approx(0.01)
    assert (p.token_lr, p.model_lr, p.iters_phase1, p.iters_phase2) == (
        defaults.token_lr,
        defaults.model_lr,
        defaults.iters_phase1,
        defaults.iters_phase2,
    )


def test_smoke_config_is_a_separate_faster_run() -> None:
    smoke = load_experiment(SMOKE_CONFIG)
    reference = load_experiment(DEFAULT_CONFIG)
    assert smoke.seeds == [0]
    assert smoke.personalization.iters_phase1 < reference.personalization.iters_phase1
    assert config_hash(smoke, 0) != config_hash(reference, 0)
    assert smoke.backends() == reference.backends()


def test_unknown_keys_and_bad_yaml_are_config_errors(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="Invalid config"):
        load_experiment(_write(tmp_path / "extra.yaml", "dataset:\n  colour: red\n"))
    with pytest.raises(ConfigError, match="Failed to read config"):
        load_experiment(_write(tmp_path / "broken.yaml", "dataset: [unclosed\n"))
    with pytest.raises(ConfigError, match="must be a mapping"):
        load_experiment(_write(tmp_path / "list.yaml", "- 1\n- 2\n"))
    with pytest.raises(ConfigError, match="Schema file not found"):
        load_experiment(_write(tmp_path / "schema.yaml", "schema_path: nowhere.json\n"))


def test_method_and_schedule_consistency(tmp_path: Path) -> None:
    no_backend = "methods:\n  - {name: standard, kind: standard}\n  - {name: gen, kind: generated}\n"
    with pytest.raises(ConfigError, match="backend is required"):
        load_experiment(_write(tmp_path / "a.yaml", no_backend))
    no_baseline = "methods:\n  - {name: real, kind: real_cooccur}\n"
    with pytest.raises(ConfigError, match="standard baseline"):
        load_experiment(_write(tmp_path / "b.yaml", no_baseline))
    with pytest.raises(ConfigError, match="must not exceed"):
        load_experiment(_write(tmp_path / "c.yaml", "diffusion: {timesteps: 10}\ngeneration: {steps: 20}\n"))


def test_config_hash_is_stable_and_seed_specific() -> None:
    a = ExperimentConfig()
    b = ExperimentConfig.model_validate(json.loads(json.dumps(a.model_dump(mode="json"))))
    assert config_hash(a, 0) == config_hash(b, 0)
    assert config_hash(a, 0) != config_hash(a, 1)
    moved = a.model_copy(update={"output_root": "elsewhere"})
    assert config_hash(moved, 0) == config_hash(a, 0)
    changed = ExperimentConfig.model_validate({"dataset": {"bias_ratio": 0.8}})
    assert config_hash(changed, 0) != config_hash(a, 0)


def test_runtime_settings_from_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("CONTEXT_DEBIAS_WORKERS", "4")
    monkeypatch.setenv("CONTEXT_DEBIAS_TORCH_THREADS", "not-a-number")
    monkeypatch.setenv("CONTEXT_DEBIAS_OUTPUT_ROOT", "  ")
    settings = RuntimeSettings()
    assert settings.workers == 4
    assert settings.torch_threads == 0
    assert settings.output_root == ""


def test_cli_returns_2_on_config_error(tmp_path: Path) -> None:
    bad = _write(tmp_path / "bad.yaml", "unknown_section: {}\n")
    assert main(["synth-data", "--config", str(bad)]) == 2


def test_cli_returns_1_when_upstream_is_missing(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("CONTEXT_DEBIAS_OUTPUT_ROOT", raising=False)
    config = _write(tmp_path / "c.yaml", f"output_root: {tmp_path / 'runs'}\nseeds: [0]\n")
    assert main(["audit-bias", "--config", str(config)]) == 1
    (run_dir,) = (tmp_path / "runs").iterdir()
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["stages"]["audit-bias"]["status"] == "pending"


def test_cli_synth_data_writes_a_manifest(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("CONTEXT_DEBIAS_OUTPUT_ROOT", raising=False)
    text = (
        f"output_root: {tmp_path / 'runs'}\n"
        "seeds: [0]\n"
        "dataset: {images_per_class: 10}\n"
    )
    config = _write(tmp_path / "c.yaml", text)
    assert main(["synth-data", "--config", str(config), "--workers", "2"]) == 0
    (run_dir,) = (tmp_path / "runs").iterdir()
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    record = manifest["stages"]["synth-data"]
    assert record["status"] == "done"
    assert "synth-data/cooccur_train.json" in record["outputs"]
    assert json.loads((run_dir / "config.json").read_text(encoding="utf-8"))["seed"] == 0
