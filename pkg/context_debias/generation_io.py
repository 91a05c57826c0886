"""On-disk layout of a generation batch: ``<request_id>.png`` files plus ``manifest.jsonl``."""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from context_debias.dataset import read_png, write_png
from context_debias.edit_requests import EditRequest, GenerationRecord
from context_debias.tokens import LearnedToken, LiteralWord, PromptSpec


def write_generations(records: Sequence[GenerationRecord], root: Path) -> None:
    """``<request_id>.png`` per successful record plus ``manifest.jsonl``."""
    root.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for record in sorted(records, key=lambda r: r.request.request_id):
        if record.ok and record.pixels is not None:
            write_png(root / f"{record.request.request_id}.png", record.pixels)
        payload = record.to_dict()
        payload["prompt_tokens"] = record.prompt.to_dict() if record.prompt is not None else None
        lines.append(json.dumps(payload, ensure_ascii=False, sort_keys=True))
    tmp = root / "manifest.jsonl.tmp"
    tmp.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    tmp.replace(root / "manifest.jsonl")


def read_generations(root: Path, *, with_pixels: bool = True) -> list[GenerationRecord]:
    records: list[GenerationRecord] = []
    manifest = root / "manifest.jsonl"
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        request = EditRequest.from_dict(raw["request"])
        pixels = None
        if with_pixels and raw.get("status") == "ok":
            pixels = read_png(root / f"{request.request_id}.png")
        prompt = None
        if raw.get("prompt") is not None:
            words = _prompt_tokens(raw.get("prompt_tokens"), raw["prompt"])
            prompt = PromptSpec(tuple(words), template=str(raw["prompt"]))
        labels = raw.get("annotator_labels")
        scene = raw.get("scene_labels")
        records.append(
            GenerationRecord(
                request=request,
                prompt=prompt,
                pixels=pixels,
                annotator_labels=None if labels is None else frozenset(labels),
                verdict=str(raw.get("verdict") or "pending"),
                status=str(raw.get("status") or "ok"),
                failure_reason=raw.get("failure_reason"),
                scene_labels=None if scene is None else frozenset(scene),
            )
        )
    return records


def _prompt_tokens(raw: Mapping[str, Any] | None, text: str) -> list[LiteralWord | LearnedToken]:
    if raw is None:
        return [LiteralWord(w) for w in text.split()]
    out: list[LiteralWord | LearnedToken] = []
    for tok in raw.get("tokens") or []:
        if "learned" in tok:
            out.append(LearnedToken(int(tok["learned"]), str(tok["name"])))
        else:
            out.append(LiteralWord(str(tok["word"])))
    return out
