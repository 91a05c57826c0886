from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from sklearn.decomposition import PCA

from context_debias.classifier import TrainedClassifier
from context_debias.errors import InsufficientDataError
from context_debias.scenegen import ImageSample

LOGGER = logging.getLogger("context-debias")

REFERENCE = "real_exclusive"


@dataclass(frozen=True, eq=False)
class EmbeddingProjection:
    coords: dict[str, np.ndarray]
    ids: dict[str, list[str]]
    centroid_distance_2d: dict[str, float]
    centroid_distance_full: dict[str, float]
    explained_variance: tuple[float, float]
    reference: str = REFERENCE

    def to_dict(self) -> dict[str, Any]:
        return {
            "reference": self.reference,
            "explained_variance": list(self.explained_variance),
            "centroid_distance_2d": dict(sorted(self.centroid_distance_2d.items())),
            "centroid_distance_full": dict(sorted(self.centroid_distance_full.items())),
            "sizes": {k: len(v) for k, v in sorted(self.ids.items())},
        }


def project_features(
    fit_features: np.ndarray,
    populations: Mapping[str, tuple[Sequence[str], np.ndarray]],
    *,
    reference: str = REFERENCE,
) -> EmbeddingProjection:
    """Fit two principal directions on ``fit_features`` and place every population in that plane.

    Distances are between population centroids and the ``reference`` centroid, both in the
    plane and in the full feature space.
    """
    if fit_features.shape[0] < 2:
        raise InsufficientDataError("Projection needs at least two fitting feature rows")
    kept: dict[str, tuple[list[str], np.ndarray]] = {}
    for name, (ids, feats) in populations.items():
        if len(ids) < 2:
            LOGGER.warning("Skipping small embedding population name=%s size=%s", name, len(ids))
            continue
        kept[name] = (list(ids), np.asarray(feats, dtype=np.float64))
    if reference not in kept:
        raise InsufficientDataError(f"Reference population missing or too small name={reference}")

    n_components = min(2, fit_features.shape[0], fit_features.shape[1])
    pca = PCA(n_components=n_components, svd_solver="full").fit(fit_features)
    coords = {name: _pad(pca.transform(feats)) for name, (_, feats) in kept.items()}
    ref_2d = coords[reference].mean(axis=0)
    ref_full = kept[reference][1].mean(axis=0)
    ratio = [float(x) for x in pca.explained_variance_ratio_] + [0.0] * (2 - n_components)
    return EmbeddingProjection(
        coords=coords,
        ids={name: ids for name, (ids, _) in kept.items()},
        centroid_distance_2d={name: float(np.linalg.norm(c.mean(axis=0) - ref_2d)) for name, c in coords.items()},
        centroid_distance_full={
            name: float(np.linalg.norm(feats.mean(axis=0) - ref_full)) for name, (_, feats) in kept.items()
        },
        explained_variance=(ratio[0], ratio[1]),
        reference=reference,
    )


def _pad(coords: np.ndarray) -> np.ndarray:
    if coords.shape[1] == 2:
        return coords
    return np.concatenate([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))], axis=1)


def embedding_projection(
    model: TrainedClassifier,
    fit_samples: Sequence[ImageSample],
    populations: Mapping[str, Sequence[ImageSample]],
    *,
    reference: str = REFERENCE,
) -> EmbeddingProjection:
    """Penultimate features of ``model`` projected with directions fitted on ``fit_samples``."""
    feats = {name: ([s.id for s in samples], model.features(samples)) for name, samples in populations.items()}
    return project_features(model.features(fit_samples), feats, reference=reference)


def save_projection(projection: EmbeddingProjection, json_path: Path, npz_path: Path) -> None:
    json_path.parent.mkdir(parents=True, exist_ok=True)
    payload = projection.to_dict()
    payload["ids"] = {k: list(v) for k, v in sorted(projection.ids.items())}
    json_path.write_text(json.dumps(payload, ensure_ascii=True, sort_keys=True, indent=2), encoding="utf-8")
    with open(npz_path, "wb") as f:
        np.savez(f, **{name: projection.coords[name] for name in sorted(projection.coords)})


def load_projection(json_path: Path, npz_path: Path) -> EmbeddingProjection:
    raw = json.loads(json_path.read_text(encoding="utf-8"))
    with np.load(npz_path) as arrays:
        coords = {name: np.asarray(arrays[name]) for name in arrays.files}
    ratio = raw.get("explained_variance") or [0.0, 0.0]
    return EmbeddingProjection(
        coords=coords,
        ids={str(k): [str(x) for x in v] for k, v in (raw.get("ids") or {}).items()},
        centroid_distance_2d={str(k): float(v) for k, v in (raw.get("centroid_distance_2d") or {}).items()},
        centroid_distance_full={str(k): float(v) for k, v in (raw.get("centroid_distance_full") or {}).items()},
        explained_variance=(float(ratio[0]), float(ratio[1])),
        reference=str(raw.get("reference") or REFERENCE),
    )
