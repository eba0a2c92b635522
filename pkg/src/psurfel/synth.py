"""Deterministic synthetic voxel clouds: tilted plane, sphere shell, cube shell."""
from __future__ import annotations

import math

import numpy as np

from .errors import EmptyInputError
from .geometry import PointCloud

SHAPES = ("plane", "sphere", "cube-shell")
MIN_DEPTH, MAX_DEPTH = 4, 12


def _extent(depth: int, scale: float) -> tuple[float, float]:
    """Centre and half-width of the region a shape occupies."""
    size = float(1 << depth)
    return size / 2.0, max(1.0, scale * (size - 2.0) / 2.0)


def plane(depth: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """One voxel per (x, y) column: z = c + a (x - c) + b (y - c) with a small tilt."""
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-0.15, 0.15, size=2)
    size = 1 << depth
    centre, half = _extent(depth, scale)
    lo = int(math.floor(centre - half)) if scale < 1 else 0
    hi = int(math.ceil(centre + half)) if scale < 1 else size
    xs = np.arange(max(lo, 0), min(hi, size))
    x, y = np.meshgrid(xs, xs, indexing="ij")
    z = np.rint(centre + a * (x - centre) + b * (y - centre))
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    return pts[(pts[:, 2] >= 0) & (pts[:, 2] < size)]


def sphere(depth: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Voxelised sphere surface: dense Fibonacci samples rounded to the grid.

    Every voxel lies within sqrt(3)/2 of the analytic radius.
    """
    rng = np.random.default_rng(seed)
    centre, half = _extent(depth, scale)
    radius = half - 1.0
    c = centre + rng.uniform(-0.5, 0.5, size=3)
    n = int(math.ceil(16 * math.pi * radius * radius)) + 64
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azim = math.pi * (1.0 + math.sqrt(5.0)) * i
    dirs = np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], axis=1)
    return np.rint(c + radius * dirs)


def cube_shell(depth: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Surface voxels of an axis-aligned box."""
    rng = np.random.default_rng(seed)
    centre, half = _extent(depth, scale)
    offset = rng.integers(0, 2, size=3)
    lo = np.maximum(0, np.floor(centre - half + offset)).astype(int)
    hi = np.minimum((1 << depth) - 1, np.floor(centre + half - 1 + offset)).astype(int)
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        gu, gv = np.meshgrid(np.arange(lo[u], hi[u] + 1), np.arange(lo[v], hi[v] + 1), indexing="ij")
        for fixed in (lo[axis], hi[axis]):
            face = np.empty((gu.size, 3), dtype=np.int64)
            face[:, axis] = fixed
            face[:, u] = gu.ravel()
            face[:, v] = gv.ravel()
            faces.append(face)
    return np.concatenate(faces)


_GENERATORS = {"plane": plane, "sphere": sphere, "cube-shell": cube_shell}


def generate(shape: str, depth: int, density: float = 1.0, seed: int = 0,
             scale: float = 1.0) -> PointCloud:
    """Generate ``shape`` on a ``2**depth`` grid.

    ``density`` keeps that fraction of surface voxels (seeded subsampling);
    ``scale`` is the fraction of the grid the shape spans.
    """
    if shape not in _GENERATORS:
        raise ValueError(f"unknown shape {shape!r}; choose from {', '.join(SHAPES)}")
    if not MIN_DEPTH <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must lie in [{MIN_DEPTH}, {MAX_DEPTH}]")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    if not 0 < scale <= 1:
        raise ValueError("scale must lie in (0, 1]")
    pts = _GENERATORS[shape](depth, seed, scale)
    pts = np.unique(pts.astype(np.int64), axis=0)
    if density < 1:
        keep = np.random.default_rng([seed, 1]).random(len(pts)) < density
        pts = pts[keep]
    if len(pts) == 0:
        raise EmptyInputError("generator produced no points; increase density")
    return PointCloud(depth, pts)
