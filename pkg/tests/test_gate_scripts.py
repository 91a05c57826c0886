from __future__ import annotations

import ast
from pathlib import Path

import pytest

from scripts._scan import RUNTIME_ROOTS, parse, python_files
from scripts.check_nested_event_loops import loop_starts
from scripts.check_nested_event_loops import main as nested_main
from scripts.check_no_vague_signatures import main as vague_main
from scripts.check_no_vague_signatures import vague_part, vague_signatures

MAX_MODULE_LINES = 250


def _annotation(text: str) -> ast.AST:
    return ast.parse(text, mode="eval").body


@pytest.mark.parametrize("path", sorted(python_files(RUNTIME_ROOTS)), ids=lambda p: p.name)
def test_package_modules_stay_small(path: Path) -> None:
    assert len(path.read_text(encoding="utf-8").splitlines()) <= MAX_MODULE_LINES


def test_package_passes_the_ast_gates(capsys: pytest.CaptureFixture[str]) -> None:
    assert nested_main([]) == 0
    assert vague_main([]) == 0
    assert "ok nested_event_loops" in capsys.readouterr().out


def test_event_loop_outside_the_worker_edge_is_reported(tmp_path: Path) -> None:
    module = tmp_path / "runner.py"
    module.write_text("import asyncio\n\n\ndef go(job):\n    return asyncio.run(job())\n", encoding="utf-8")
    tree, _ = parse(module)
    (finding,) = loop_starts(tree, module)
    assert finding.line == 5
    assert "asyncio.run" in finding.message
    assert nested_main([str(module)]) == 1


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("dict[str, Any]", None),
        ("Mapping[str, Any] | None", None),
        ("list[dict[str, Any]]", None),
        ("Any", "Any"),
        ("list[Any]", "Any"),
        ("dict[int, object]", "object"),
        ("np.ndarray | object", "object"),
    ],
)
def test_json_object_shape_is_the_only_allowed_top_type(text: str, expected: str | None) -> None:
    assert vague_part(_annotation(text)) == expected


def test_allow_marker_skips_one_function(tmp_path: Path) -> None:
    module = tmp_path / "payload.py"
    module.write_text(
        "from typing import Any\n\n\n"
        "# context-debias-allow-vague-signature\n"
        "def dump(payload: Any) -> str:\n    return str(payload)\n\n\n"
        "def load(raw: Any) -> str:\n    return str(raw)\n\n\n"
        "def seed(*names: object) -> int:\n    return len(names)\n",
        encoding="utf-8",
    )
    tree, lines = parse(module)
    findings = vague_signatures(tree, lines, module)
    assert [f.message.split(":")[0] for f in findings] == ["load"]
