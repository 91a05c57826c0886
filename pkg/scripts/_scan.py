"""File discovery and reporting shared by the AST gate scripts."""

from __future__ import annotations

import ast
import sys
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]
RUNTIME_ROOTS = (REPO_ROOT / "context_debias",)
_SKIPPED_DIRS = frozenset(
    {".git", ".venv", "venv", "__pycache__", "build", "dist", "runs", "examples", "scripts", "tests"}
)


@dataclass(frozen=True)
class Finding:
    path: Path
    line: int
    message: str

    def render(self) -> str:
        path = self.path.relative_to(REPO_ROOT) if self.path.is_relative_to(REPO_ROOT) else self.path
        return f"{path}:{self.line}: {self.message}"


def scan_roots(raw_paths: Sequence[str]) -> tuple[Path, ...]:
    if not raw_paths:
        return RUNTIME_ROOTS
    return tuple(Path(raw).expanduser().resolve(strict=False) for raw in raw_paths)


def python_files(roots: Sequence[Path]) -> Iterator[Path]:
    for root in roots:
        candidates = [root] if root.is_file() else sorted(root.rglob("*.py*"))
        for path in candidates:
            if path.suffix not in {".py", ".pyi"} or not path.is_file():
                continue
            if _SKIPPED_DIRS.intersection(path.relative_to(root).parts[:-1] if root.is_dir() else ()):
                continue
            yield path


def parse(path: Path) -> tuple[ast.Module, list[str]]:
    source = path.read_text(encoding="utf-8")
    return ast.parse(source, filename=str(path)), source.splitlines()


def dotted_name(node: ast.AST) -> str:
    if isinstance(node, ast.Name):
        return node.id
    if isinstance(node, ast.Attribute):
        parent = dotted_name(node.value)
        return f"{parent}.{node.attr}" if parent else node.attr
    if isinstance(node, ast.Constant) and isinstance(node.value, str):
        return node.value
    if isinstance(node, ast.Subscript):
        return dotted_name(node.value)
    return ""


def report(findings: Sequence[Finding], gate: str) -> int:
    for finding in findings:
        print(finding.render(), file=sys.stderr)
    if findings:
        print(f"{gate}: {len(findings)} finding(s)", file=sys.stderr)
        return 1
    print(f"ok {gate}")
    return 0
