from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from context_debias.embedding import EmbeddingProjection  # noqa: E402

_PNG_METADATA = {"Software": None}


def _save(fig: Figure, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def _matrix(raw: Mapping[str, Any]) -> tuple[list[str], list[str], np.ndarray]:
    values = np.array([[np.nan if v is None else float(v) for v in row] for row in raw["values"]], dtype=np.float64)
    return list(raw["biased"]), list(raw["contexts"]), values.reshape(len(raw["biased"]), len(raw["contexts"]))


def cooccur_heatmap(before: Mapping[str, Any], after: Mapping[str, Any] | None, path: Path) -> None:
    """P(context | object) before (and after) augmentation, side by side."""
    panels = [("original", before)] + ([("augmented", after)] if after is not None else [])
    fig, axes = plt.subplots(1, len(panels), figsize=(5.5 * len(panels), 4.5), squeeze=False)
    for ax, (title, raw) in zip(axes[0], panels, strict=True):
        rows, cols, values = _matrix(raw)
        im = ax.imshow(values, vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_xticks(range(len(cols)), cols, rotation=45, ha="right")
        ax.set_yticks(range(len(rows)), rows)
        ax.set_title(f"P(c | b), {title}")
        fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def bias_score_bars(rows: Sequence[Mapping[str, Any]], path: Path) -> None:
    """Grouped bars: targeted context vs second-highest context per biased class."""
    objects = sorted({str(r["biased"]) for r in rows})
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(objects)), 3.8))
    x = np.arange(len(objects))
    for offset, role, color in ((-0.2, "target", "#c0392b"), (0.2, "second", "#7f8c8d")):
        heights = []
        for b in objects:
            match = [r for r in rows if r["biased"] == b and r["role"] == role and r["score"] is not None]
            heights.append(float(match[0]["score"]) if match else 0.0)
        ax.bar(x + offset, heights, width=0.4, label=role, color=color)
    ax.axhline(1.0, color="black", linewidth=0.8, linestyle=":")
    ax.set_xticks(x, objects, rotation=30, ha="right")
    ax.set_ylabel("bias score")
    ax.legend()
    _save(fig, path)


def embedding_scatter(projection: EmbeddingProjection, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 4.5))
    for name in sorted(projection.coords):
        c = projection.coords[name]
        ax.scatter(c[:, 0], c[:, 1], s=8, alpha=0.6, label=f"{name} ({len(c)})")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(fontsize=7)
    _save(fig, path)


def comparison_bars(
    table: Mapping[str, Mapping[str, Mapping[str, float | None]]], metrics: Sequence[str], path: Path
) -> None:
    """One bar group per metric, one bar per method, error bars from the standard deviation."""
    methods = list(table)
    fig, ax = plt.subplots(figsize=(max(5.0, 1.6 * len(metrics)), 3.8))
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(metrics))
    for i, method in enumerate(methods):
        means = [table[method].get(m, {}).get("mean") for m in metrics]
        sds = [table[method].get(m, {}).get("sd") for m in metrics]
        ax.bar(
            x + (i - (len(methods) - 1) / 2) * width,
            [0.0 if v is None else v for v in means],
            width=width,
            yerr=[0.0 if v is None else v for v in sds],
            label=method,
            capsize=2,
        )
    ax.set_xticks(x, list(metrics), rotation=20, ha="right")
    ax.legend(fontsize=7)
    _save(fig, path)
