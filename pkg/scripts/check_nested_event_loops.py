#!/usr/bin/env python3
"""Fail when library code starts an event loop outside the worker-pool edge."""

from __future__ import annotations

import argparse
import ast
import sys
from collections.abc import Sequence
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from scripts._scan import REPO_ROOT, Finding, dotted_name, parse, python_files, report, scan_roots  # noqa: E402

# run_bounded_sync is the one synchronous entry into asyncio.
ALLOWED_EDGE_FILES = frozenset({(REPO_ROOT / "context_debias" / "workers.py").resolve()})
LOOP_STARTERS = frozenset({"asyncio.run", "asyncio.new_event_loop", "asyncio.get_event_loop", "asyncio.Runner"})


def loop_starts(tree: ast.AST, path: Path) -> list[Finding]:
    findings: list[Finding] = []
    for node in ast.walk(tree):
        if not isinstance(node, ast.Call):
            continue
        name = dotted_name(node.func)
        if name in LOOP_STARTERS or name.endswith(".run_until_complete"):
            findings.append(Finding(path, node.lineno, f"event loop started outside workers.py: {name}"))
    return findings


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("paths", nargs="*", help="Files or folders to scan; defaults to the package.")
    args = parser.parse_args(argv)
    findings: list[Finding] = []
    for path in python_files(scan_roots(args.paths)):
        if path.resolve() in ALLOWED_EDGE_FILES:
            continue
        tree, _ = parse(path)
        findings.extend(loop_starts(tree, path))
    return report(findings, "nested_event_loops")


if __name__ == "__main__":
    raise SystemExit(main())
