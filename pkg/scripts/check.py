"""Run the static-analysis gates for context-debias (``uv run check``)."""

from __future__ import annotations

import argparse
import os
import subprocess  # noqa: S404
import sys
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

_REPO_ROOT = Path(__file__).resolve().parents[1]
_PACKAGE = "context_debias"


@dataclass(frozen=True)
class _Gate:
    name: str
    description: str
    command: tuple[str, ...]


def _tool(name: str) -> str:
    """Prefer the executable installed next to the running interpreter (the project venv)."""
    local = Path(sys.executable).resolve(strict=False).parent / name
    return str(local) if local.is_file() else name


def _gates(targets: tuple[str, ...]) -> tuple[_Gate, ...]:
    def script(name: str) -> tuple[str, ...]:
        return (sys.executable, str(_REPO_ROOT / "scripts" / name), *targets)

    return (
        _Gate(
            "nested-event-loops",
            "No event loop outside the worker-pool edge.",
            script("check_nested_event_loops.py"),
        ),
        _Gate(
            "no-vague-signatures",
            "No Any/object in signatures outside JSON boundaries.",
            script("check_no_vague_signatures.py"),
        ),
        _Gate("ruff", "Ruff with every rule family enabled.", (_tool("ruff"), "check", "--no-cache", *targets)),
        _Gate("basedpyright", "BasedPyright strict type checking.", (_tool("basedpyright"), "--warnings", *targets)),
        _Gate(
            "pylint",
            "Pylint module size, duplication and exception-handling checks.",
            (_tool("pylint"), "--rcfile", "pyproject.toml", "--fail-under=10", *targets),
        ),
        _Gate(
            "semgrep",
            "Semgrep rules from .semgrep.yml.",
            (_tool("semgrep"), "--config", str(_REPO_ROOT / ".semgrep.yml"), "--error", "--metrics=off", *targets),
        ),
    )


def _parser(names: Sequence[str]) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--only", action="append", choices=list(names), help="Run only this gate (repeatable).")
    parser.add_argument("--list", action="store_true", help="Print the gate commands without running them.")
    parser.add_argument("paths", nargs="*", help=f"Files or folders to check; defaults to {_PACKAGE}/.")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    all_names = tuple(gate.name for gate in _gates(()))
    args = _parser(all_names).parse_args(argv)
    targets = tuple(str(Path(p).resolve(strict=False)) for p in args.paths) or (str(_REPO_ROOT / _PACKAGE),)
    wanted = set(args.only or all_names)
    selected = [gate for gate in _gates(targets) if gate.name in wanted]

    env = {**os.environ, "SEMGREP_SEND_METRICS": "off"}
    failed: list[str] = []
    for gate in selected:
        print(f"\n==> {gate.name}: {gate.description}\n$ {' '.join(gate.command)}", flush=True)
        if args.list:
            continue
        rc = subprocess.run(gate.command, cwd=_REPO_ROOT, env=env, check=False).returncode  # noqa: S603
        print(f"<== {gate.name}: {'ok' if rc == 0 else f'failed rc={rc}'}", flush=True)
        if rc != 0:
            failed.append(gate.name)

    if failed:
        print("\nFAILED static gates: " + ", ".join(failed), file=sys.stderr, flush=True)
        return 1
    if not args.list:
        print("\nAll static gates passed.", flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
