"""Glyph geometry, rasterization and per-instance colors for procedural scenes."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from matplotlib.path import Path as PolygonPath

from context_debias.errors import SchemaError
from context_debias.schema import CategorySchema
from context_debias.seeding import numpy_rng


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    size: float
    rotation: float = 0.0

    @property
    def radius(self) -> float:
        return self.size / 2.0


def _regular(n: int, radius: float = 1.0, start_deg: float = -90.0) -> np.ndarray:
    angles = np.deg2rad(start_deg + 360.0 * np.arange(n) / n)
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def _star() -> np.ndarray:
    outer = _regular(5)
    inner = _regular(5, radius=0.45, start_deg=-54.0)
    return np.stack([outer, inner], axis=1).reshape(10, 2)


def _box(hx: float, hy: float) -> np.ndarray:
    return np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]], dtype=np.float64)


# Unit glyphs fit inside the unit circle, so any rotation stays within ``size / 2`` of the center.
_UNIT_GLYPHS: dict[str, np.ndarray] = {
    "square": _box(2**-0.5, 2**-0.5),
    "triangle": _regular(3),
    "pentagon": _regular(5),
    "hexagon": _regular(6),
    "star": _star(),
    "cross": np.array(
        [
            [-0.3, -0.95], [0.3, -0.95], [0.3, -0.3], [0.95, -0.3], [0.95, 0.3], [0.3, 0.3],
            [0.3, 0.95], [-0.3, 0.95], [-0.3, 0.3], [-0.95, 0.3], [-0.95, -0.3], [-0.3, -0.3],
        ]
    ),
    "circle": _regular(24),
    "bar": _box(0.9, 0.35),
    "tall": _box(0.42, 0.9),
    "wide": _box(0.9, 0.42),
    "tee": np.array(
        [[-0.9, -0.42], [0.9, -0.42], [0.9, -0.1], [0.2, -0.1], [0.2, 0.9], [-0.2, 0.9], [-0.2, -0.1], [-0.9, -0.1]]
    ),
    "block": _box(0.7, 0.7),
}


def glyph_vertices(shape: str, pose: Pose) -> np.ndarray:
    try:
        unit = _UNIT_GLYPHS[shape]
    except KeyError:
        raise SchemaError(f"Unknown glyph shape={shape}") from None
    theta = np.deg2rad(pose.rotation)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return unit @ rot.T * pose.radius + np.array([pose.x, pose.y])


def glyph_area(shape: str, size: float) -> float:
    """Analytic polygon area (shoelace) of a glyph drawn at ``size``."""
    v = glyph_vertices(shape, Pose(0.0, 0.0, size))
    x, y = v[:, 0], v[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


@functools.lru_cache(maxsize=8)
def _pixel_centers(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)


def rasterize(vertices: np.ndarray, h: int, w: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the polygon."""
    inside = PolygonPath(vertices).contains_points(_pixel_centers(h, w))
    return inside.reshape(h, w)


def instance_color(schema: CategorySchema, category: str, seed: int) -> np.ndarray:
    base = np.array(schema.appearance[category].color, dtype=np.float64)
    rng = numpy_rng(seed, "color", category)
    return np.clip(base + rng.normal(0.0, 0.05, 3), 0.0, 1.0)


def background_texture(schema: CategorySchema, background: str, size: int, seed: int) -> np.ndarray:
    look = schema.appearance[background]
    rng = numpy_rng(seed, "texture", background)
    base = np.array(look.color, dtype=np.float64) + rng.normal(0.0, 0.03, 3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    if look.shape == "noise":
        img += rng.normal(0.0, 0.08, (size, size, 3))
    return img
