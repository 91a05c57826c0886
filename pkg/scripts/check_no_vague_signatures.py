#!/usr/bin/env python3
"""Fail on ``Any``/``object`` in function signatures.

``dict[str, Any]`` and ``Mapping[str, Any]`` are the JSON-object shape used at every
serialization boundary and pass; so do ``*args``/``**kwargs`` annotations. A function whose
``def`` line (or the line above it) carries ``context-debias-allow-vague-signature`` is skipped.
"""

from __future__ import annotations

import argparse
import ast
import sys
from collections.abc import Iterator, Sequence
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from scripts._scan import Finding, dotted_name, parse, python_files, report, scan_roots  # noqa: E402

ALLOW_MARKER = "context-debias-allow-vague-signature"
_TOP_TYPES = frozenset({"Any", "typing.Any", "object"})
_JSON_OBJECT_BASES = frozenset({"dict", "Mapping", "MutableMapping"})


def _is_json_object(node: ast.Subscript) -> bool:
    if dotted_name(node.value) not in _JSON_OBJECT_BASES or not isinstance(node.slice, ast.Tuple):
        return False
    elts = node.slice.elts
    return len(elts) == 2 and dotted_name(elts[0]) == "str" and dotted_name(elts[1]) in _TOP_TYPES


def vague_part(annotation: ast.AST) -> str | None:
    """The first top type inside ``annotation`` that is not a JSON-object shape."""
    if isinstance(annotation, ast.Subscript):
        if _is_json_object(annotation):
            return None
        parts = annotation.slice.elts if isinstance(annotation.slice, ast.Tuple) else [annotation.slice]
        return next((found for part in parts if (found := vague_part(part)) is not None), None)
    if isinstance(annotation, ast.BinOp):
        return vague_part(annotation.left) or vague_part(annotation.right)
    if isinstance(annotation, ast.Constant) and isinstance(annotation.value, str):
        return vague_part(ast.parse(annotation.value, mode="eval").body)
    name = dotted_name(annotation)
    return name if name in _TOP_TYPES else None


def _annotations(node: ast.FunctionDef | ast.AsyncFunctionDef) -> Iterator[tuple[int, ast.AST]]:
    for arg in (*node.args.posonlyargs, *node.args.args, *node.args.kwonlyargs):
        if arg.annotation is not None:
            yield arg.lineno, arg.annotation
    if node.returns is not None:
        yield node.lineno, node.returns


def vague_signatures(tree: ast.AST, lines: Sequence[str], path: Path) -> list[Finding]:
    findings: list[Finding] = []
    for node in ast.walk(tree):
        if not isinstance(node, ast.FunctionDef | ast.AsyncFunctionDef):
            continue
        if any(ALLOW_MARKER in line for line in lines[max(node.lineno - 2, 0) : node.lineno]):
            continue
        for line, annotation in _annotations(node):
            part = vague_part(annotation)
            if part is not None:
                findings.append(Finding(path, line, f"{node.name}: `{ast.unparse(annotation)}` uses {part}"))
    return findings


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("paths", nargs="*", help="Files or folders to scan; defaults to the package.")
    args = parser.parse_args(argv)
    findings: list[Finding] = []
    for path in python_files(scan_roots(args.paths)):
        tree, lines = parse(path)
        findings.extend(vague_signatures(tree, lines, path))
    return report(findings, "no_vague_signatures")


if __name__ == "__main__":
    raise SystemExit(main())
