"""PLY reading and writing for voxelised geometry (x, y, z only)."""
from __future__ import annotations

import os
import re

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError as _PlyfileError

from .errors import CoordinateRangeError, PlyParseError
from .geometry import MAX_DEPTH, PointCloud

INTEGER_TOLERANCE = 1e-6
_DEPTH_COMMENT = re.compile(r"^depth\s+(\d+)$")


def _declared_depth(ply: PlyData) -> int | None:
    for comment in ply.comments:
        m = _DEPTH_COMMENT.match(comment.strip())
        if m:
            return int(m.group(1))
    return None


def read_vertices(path) -> tuple[np.ndarray, int | None]:
    """Raw float64 ``(n, 3)`` vertex coordinates plus the ``comment depth`` value if present."""
    try:
        ply = PlyData.read(os.fspath(path))
    except FileNotFoundError:
        raise
    except (_PlyfileError, ValueError, EOFError, IndexError, KeyError) as exc:
        raise PlyParseError(f"{path}: {exc}") from exc
    if "vertex" not in ply:
        raise PlyParseError(f"{path}: no vertex element")
    vertex = ply["vertex"]
    names = vertex.data.dtype.names or ()
    missing = [n for n in "xyz" if n not in names]
    if missing:
        raise PlyParseError(f"{path}: vertex element lacks {', '.join(missing)}")
    xyz = np.stack([np.asarray(vertex[n], dtype=np.float64) for n in "xyz"], axis=1)
    return xyz, _declared_depth(ply)


def load_ply(path, depth: int | None = None, quantize: bool = False) -> PointCloud:
    """Load a voxelised cloud.

    Coordinates must be integers within ``INTEGER_TOLERANCE`` unless ``quantize``
    is set, in which case they are rounded. The bit depth comes from the
    argument, else a ``comment depth N`` header line, else the smallest depth
    holding the largest coordinate.
    """
    xyz, declared = read_vertices(path)
    if not np.all(np.isfinite(xyz)):
        raise PlyParseError(f"{path}: non-finite coordinates")
    rounded = np.round(xyz)
    if not quantize and len(xyz) and np.max(np.abs(xyz - rounded)) > INTEGER_TOLERANCE:
        raise CoordinateRangeError(f"{path}: non-integer coordinates (use explicit quantization)")
    if len(rounded) and rounded.min() < 0:
        raise CoordinateRangeError(f"{path}: negative coordinates")
    if depth is None:
        depth = declared
    if depth is None:
        top = int(rounded.max()) if len(rounded) else 0
        depth = max(1, top.bit_length())
    if depth > MAX_DEPTH:
        raise CoordinateRangeError(f"{path}: depth {depth} exceeds {MAX_DEPTH}")
    return PointCloud(depth, rounded.astype(np.int64))


def save_ply(cloud: PointCloud, path, binary: bool = False) -> None:
    """Write ``cloud``; ASCII with integer-valued float coordinates by default."""
    pts = cloud.points
    vertex = np.empty(len(pts), dtype=[("x", "f4"), ("y", "f4"), ("z", "f4")])
    for i, name in enumerate("xyz"):
        vertex[name] = pts[:, i]
    element = PlyElement.describe(vertex, "vertex")
    PlyData([element], text=not binary, byte_order="<",
            comments=[f"depth {cloud.depth}"]).write(os.fspath(path))
