from __future__ import annotations

import json
import logging
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from context_debias.edit_requests import GenerationRecord
from context_debias.errors import PreconditionError
from context_debias.scenegen import ImageSample
from context_debias.seeding import numpy_rng

LOGGER = logging.getLogger("context-debias")

SELECTION_MODES = ("with_selection", "without_selection")
QUOTA_SCHEMES = ("matched_cooccur", "group_balanced", "all_successful")

Group = tuple[str | None, str | None]


@dataclass(frozen=True)
class SelectionPolicy:
    mode: str = "with_selection"
    scheme: str = "matched_cooccur"
    caps: Mapping[str, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in SELECTION_MODES:
            raise PreconditionError(f"Unknown selection mode={self.mode}")
        if self.scheme not in QUOTA_SCHEMES:
            raise PreconditionError(f"Unknown quota scheme={self.scheme}")


@dataclass(frozen=True)
class SelectionStats:
    """Counts from the original training split that quotas are measured against."""

    cooccur_counts: Mapping[tuple[str, str], int] = field(default_factory=dict)
    group_sizes: Mapping[Group, int] = field(default_factory=dict)


@dataclass
class PairReport:
    total: int = 0
    accepted: int = 0
    selected: int = 0
    quota: int | None = None
    shortfall: int = 0

    @property
    def success_rate(self) -> float:
        return self.accepted / self.total if self.total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "accepted": self.accepted,
            "success_rate": self.success_rate,
            "selected": self.selected,
            "quota": self.quota,
            "shortfall": self.shortfall,
        }


@dataclass
class SelectionReport:
    mode: str
    scheme: str
    pairs: dict[tuple[str, str], PairReport] = field(default_factory=dict)
    group_quotas: dict[Group, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "scheme": self.scheme,
            "pairs": {f"{b}|{c}": rep.to_dict() for (b, c), rep in sorted(self.pairs.items())},
            "group_quotas": {
                f"{g[0]}|{g[1]}": q for g, q in sorted(self.group_quotas.items(), key=lambda kv: str(kv[0]))
            },
        }


def group_quotas(sizes: Mapping[Group, int]) -> dict[Group, int]:
    """Extra images each group needs to reach the largest group's size."""
    if not sizes:
        return {}
    top = max(sizes.values())
    return {g: top - n for g, n in sizes.items()}


def record_group(record: GenerationRecord) -> Group:
    return (record.request.biased, record.request.replacement)


def _take(pool: list[GenerationRecord], quota: int | None, rng: np.random.Generator) -> list[GenerationRecord]:
    if quota is None or quota >= len(pool):
        return list(pool)
    order = rng.permutation(len(pool))
    return [pool[i] for i in sorted(order[:quota])]


def select(
    records: Sequence[GenerationRecord],
    policy: SelectionPolicy,
    stats: SelectionStats,
) -> tuple[list[GenerationRecord], SelectionReport]:
    """Filter and cap generated records into the augmentation set."""
    ordered = sorted(records, key=lambda r: r.request.request_id)
    report = SelectionReport(policy.mode, policy.scheme)
    by_pair: dict[tuple[str, str], list[GenerationRecord]] = {}
    for record in ordered:
        by_pair.setdefault((record.request.biased, record.request.context), []).append(record)

    for key, group in by_pair.items():
        rep = report.pairs.setdefault(key, PairReport())
        rep.total = len(group)
        rep.accepted = sum(1 for r in group if r.verdict == "accepted")

    def _eligible(pool: Iterable[GenerationRecord]) -> list[GenerationRecord]:
        if policy.mode == "with_selection":
            if any(r.verdict == "pending" for r in pool):
                raise PreconditionError("with_selection needs verdicts on every record")
            return [r for r in pool if r.verdict == "accepted"]
        return [r for r in pool if r.ok]

    selected: list[GenerationRecord] = []
    if policy.scheme == "group_balanced":
        report.group_quotas = group_quotas(stats.group_sizes)
        by_group: dict[Group, list[GenerationRecord]] = {}
        for record in _eligible(ordered):
            by_group.setdefault(record_group(record), []).append(record)
        for g in sorted(set(by_group) | set(report.group_quotas), key=str):
            quota = report.group_quotas.get(g, 0)
            pool = by_group.get(g, [])
            chosen = _take(pool, quota, numpy_rng(policy.seed, "select", str(g[0]), str(g[1])))
            if len(chosen) < quota:
                LOGGER.warning("Group quota shortfall group=%s quota=%s available=%s", g, quota, len(chosen))
            selected.extend(chosen)
        for r in selected:
            key = (r.request.biased, r.request.context)
            report.pairs[key].selected += 1
    else:
        for key, group in sorted(by_pair.items()):
            rep = report.pairs[key]
            pool = _eligible(group)
            quota: int | None = None
            if policy.scheme == "matched_cooccur":
                quota = int(stats.cooccur_counts.get(key, 0))
            cap = policy.caps.get(key[0])
            if cap is not None:
                quota = cap if quota is None else min(quota, cap)
            chosen = _take(pool, quota, numpy_rng(policy.seed, "select", key[0], key[1]))
            rep.quota = quota
            rep.selected = len(chosen)
            if quota is not None and len(chosen) < quota:
                rep.shortfall = quota - len(chosen)
                LOGGER.warning(
                    "Selection quota shortfall biased=%s context=%s quota=%s available=%s",
                    key[0],
                    key[1],
                    quota,
                    len(chosen),
                )
            selected.extend(chosen)

    selected.sort(key=lambda r: r.request.request_id)
    LOGGER.info(
        "Selection complete mode=%s scheme=%s selected=%s of=%s",
        policy.mode,
        policy.scheme,
        len(selected),
        len(ordered),
    )
    return selected, report


def augmentation_samples(
    selected: Sequence[GenerationRecord],
    *,
    single_object: bool = False,
) -> list[ImageSample]:
    """Selected generations as training images labelled by their annotations."""
    out: list[ImageSample] = []
    for r in selected:
        if r.pixels is None:
            continue
        labels = (
            frozenset(x for x in (r.request.biased, r.request.replacement) if x is not None)
            if single_object
            else (r.annotator_labels or frozenset())
        )
        out.append(
            ImageSample(
                id=r.request.request_id,
                pixels=r.pixels,
                masks={},
                labels=labels,
                group=record_group(r),
                split="train",
            )
        )
    return out


def rebalance_real(
    train: Sequence[ImageSample],
    pairs: Iterable[tuple[str, str]],
    cooccur_counts: Mapping[tuple[str, str], int],
    *,
    seed: int,
) -> list[ImageSample]:
    """Duplicates of real exclusive images, per pair, up to the pair's cooccur count."""
    extra: list[ImageSample] = []
    for b, c in sorted(pairs):
        pool = sorted((s for s in train if b in s.labels and c not in s.labels), key=lambda s: s.id)
        need = int(cooccur_counts.get((b, c), 0))
        if not pool or need <= 0:
            if need > 0:
                LOGGER.warning("No exclusive images to oversample biased=%s context=%s", b, c)
            continue
        picks = numpy_rng(seed, "rebalance", b, c).integers(0, len(pool), need)
        counts: Counter[str] = Counter()
        for i in picks:
            src = pool[int(i)]
            counts[src.id] += 1
            extra.append(replace(src, id=f"{src.id}-dup{counts[src.id]}"))
    return extra


def write_selection(
    path: Path, report: SelectionReport, real_ids: Sequence[str], selected: Sequence[GenerationRecord]
) -> None:
    payload = {
        "report": report.to_dict(),
        "real_ids": sorted(real_ids),
        "generated_ids": sorted(r.request.request_id for r in selected),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2), encoding="utf-8")

