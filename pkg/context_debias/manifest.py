from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from context_debias import __version__
from context_debias.errors import StageOrderError, StaleInputError

STAGES = (
    "synth-data",
    "train-annotator",
    "train-classifier",
    "audit-bias",
    "train-diffusion",
    "personalize",
    "generate",
    "verify",
    "evaluate",
    "report",
)

UPSTREAM: dict[str, tuple[str, ...]] = {
    "synth-data": (),
    "train-annotator": ("synth-data",),
    "train-classifier": ("synth-data",),
    "audit-bias": ("synth-data", "train-classifier"),
    "train-diffusion": ("synth-data",),
    "personalize": ("synth-data", "audit-bias", "train-diffusion"),
    "generate": ("synth-data", "audit-bias", "train-diffusion", "personalize"),
    "verify": ("synth-data", "train-annotator", "audit-bias", "generate"),
    "evaluate": ("synth-data", "train-classifier", "audit-bias", "generate", "verify"),
    "report": ("synth-data", "audit-bias", "evaluate"),
}

STATUSES = ("pending", "running", "done", "failed")
LOG_NAME = "stage.log"
MANIFEST_NAME = "manifest.json"


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_tree(stage_dir: Path, run_dir: Path) -> dict[str, str]:
    """Digests of every file a stage produced, keyed by path relative to the run directory."""
    out: dict[str, str] = {}
    if not stage_dir.exists():
        return out
    for path in sorted(p for p in stage_dir.rglob("*") if p.is_file()):
        if path.name == LOG_NAME or path.name.endswith(".tmp"):
            continue
        out[path.relative_to(run_dir).as_posix()] = file_digest(path)
    return out


@dataclass
class StageRecord:
    status: str = "pending"
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    duration_seconds: float | None = None
    started_at: float | None = None
    error: str | None = None
    log_tail: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "duration_seconds": self.duration_seconds,
            "started_at": self.started_at,
            "error": self.error,
            "log_tail": list(self.log_tail),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> StageRecord:
        status = str(raw.get("status") or "pending")
        return cls(
            status=status if status in STATUSES else "pending",
            inputs={str(k): str(v) for k, v in (raw.get("inputs") or {}).items()},
            outputs={str(k): str(v) for k, v in (raw.get("outputs") or {}).items()},
            duration_seconds=raw.get("duration_seconds"),
            started_at=raw.get("started_at"),
            error=raw.get("error"),
            log_tail=[str(x) for x in raw.get("log_tail") or []],
        )


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    tool_version: str = __version__
    stages: dict[str, StageRecord] = field(default_factory=lambda: {s: StageRecord() for s in STAGES})

    def stage(self, name: str) -> StageRecord:
        if name not in STAGES:
            raise StageOrderError(f"Unknown stage={name}")
        return self.stages.setdefault(name, StageRecord())

    def reset(self) -> None:
        self.stages = {s: StageRecord() for s in STAGES}

    def check_upstream(self, name: str) -> None:
        for up in UPSTREAM[name]:
            if self.stage(up).status != "done":
                raise StageOrderError(f"Stage {name} needs {up} done, status={self.stage(up).status}")

    def upstream_digests(self, name: str) -> dict[str, str]:
        digests: dict[str, str] = {}
        for up in UPSTREAM[name]:
            digests.update(self.stage(up).outputs)
        return digests

    def verify_inputs(self, name: str, run_dir: Path) -> dict[str, str]:
        """Recorded upstream outputs, after checking each file still has its recorded digest."""
        expected = self.upstream_digests(name)
        for rel, digest in sorted(expected.items()):
            path = run_dir / rel
            actual = file_digest(path) if path.exists() else None
            if actual != digest:
                raise StaleInputError(rel, digest, actual)
        return expected

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "stages": {name: self.stage(name).to_dict() for name in STAGES},
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunManifest:
        manifest = cls(
            config_hash=str(raw["config_hash"]),
            seed=int(raw.get("seed") or 0),
            tool_version=str(raw.get("tool_version") or __version__),
        )
        for name, rec in (raw.get("stages") or {}).items():
            if name in STAGES and isinstance(rec, dict):
                manifest.stages[name] = StageRecord.from_dict(rec)
        return manifest


def _write_state_atomic(path: Path, payload: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.tmp")
    tmp.write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2), encoding="utf-8")
    tmp.replace(path)


def save_manifest(manifest: RunManifest, run_dir: Path) -> None:
    _write_state_atomic(run_dir / MANIFEST_NAME, manifest.to_dict())


def load_manifest(run_dir: Path, *, config_hash: str, seed: int) -> RunManifest:
    path = run_dir / MANIFEST_NAME
    if not path.exists():
        return RunManifest(config_hash=config_hash, seed=seed)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return RunManifest(config_hash=config_hash, seed=seed)
    if not isinstance(raw, dict) or raw.get("config_hash") != config_hash:
        return RunManifest(config_hash=config_hash, seed=seed)
    return RunManifest.from_dict(raw)
