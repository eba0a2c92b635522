"""Voxel point clouds, Morton addressing and the occupancy octree.

Morton convention: within each level triple the x bit is least significant,
so the octant index of a child is ``x_bit + 2*y_bit + 4*z_bit``; the coarsest
level occupies the most significant triple.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import CoordinateRangeError, DegenerateError, EmptyInputError

MAX_DEPTH = 16


def _check_depth(depth: int) -> None:
    if not 1 <= depth <= MAX_DEPTH:
        raise CoordinateRangeError(f"depth {depth} outside [1, {MAX_DEPTH}]")


def morton_encode(x: int, y: int, z: int, depth: int) -> int:
    """Interleave three coordinates of ``depth`` bits into one Morton code."""
    if depth < 0:
        raise CoordinateRangeError(f"negative depth {depth}")
    limit = 1 << depth
    for c in (x, y, z):
        if not 0 <= c < limit:
            raise CoordinateRangeError(f"coordinate {c} outside [0, {limit})")
    code = 0
    for b in range(depth):
        code |= ((x >> b) & 1) << (3 * b)
        code |= ((y >> b) & 1) << (3 * b + 1)
        code |= ((z >> b) & 1) << (3 * b + 2)
    return code


def morton_decode(code: int, depth: int) -> tuple[int, int, int]:
    if depth < 0 or not 0 <= code < (1 << (3 * depth)):
        raise CoordinateRangeError(f"morton code {code} outside [0, 8^{depth})")
    x = y = z = 0
    for b in range(depth):
        x |= ((code >> (3 * b)) & 1) << b
        y |= ((code >> (3 * b + 1)) & 1) << b
        z |= ((code >> (3 * b + 2)) & 1) << b
    return x, y, z


def morton_encode_array(points: np.ndarray, depth: int) -> np.ndarray:
    """Vectorised :func:`morton_encode` over an ``(n, 3)`` integer array."""
    pts = np.asarray(points, dtype=np.uint64)
    code = np.zeros(len(pts), dtype=np.uint64)
    one = np.uint64(1)
    for b in range(depth):
        sb = np.uint64(b)
        for axis in range(3):
            code |= ((pts[:, axis] >> sb) & one) << np.uint64(3 * b + axis)
    return code


def morton_decode_array(codes: np.ndarray, depth: int) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint64)
    out = np.zeros((len(c), 3), dtype=np.int64)
    one = np.uint64(1)
    for b in range(depth):
        for axis in range(3):
            bit = (c >> np.uint64(3 * b + axis)) & one
            out[:, axis] |= bit.astype(np.int64) << b
    return out


@lru_cache(maxsize=None)
def local_voxel_grid(level: int) -> np.ndarray:
    """Node-local integer coordinates of the ``8**level`` voxels, Morton ordered."""
    grid = morton_decode_array(np.arange(8 ** level, dtype=np.uint64), level)
    grid.setflags(write=False)
    return grid


@dataclass(frozen=True)
class PointCloud:
    """Deduplicated integer voxel coordinates at a fixed bit depth.

    Points are stored sorted by Morton code.
    """

    depth: int
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        _check_depth(self.depth)
        pts = np.asarray(self.points)
        if pts.size == 0:
            pts = np.zeros((0, 3), dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise CoordinateRangeError(f"points must have shape (n, 3), got {pts.shape}")
        if np.issubdtype(pts.dtype, np.floating):
            if not np.all(np.isfinite(pts)) or np.any(pts != np.round(pts)):
                raise CoordinateRangeError("point coordinates must be integers")
        pts = pts.astype(np.int64)
        if len(pts) and (pts.min() < 0 or pts.max() >= (1 << self.depth)):
            raise CoordinateRangeError(
                f"coordinates must lie in [0, {1 << self.depth}) for depth {self.depth}")
        codes = np.unique(morton_encode_array(pts, self.depth))
        pts = morton_decode_array(codes, self.depth)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_codes", codes)

    @property
    def codes(self) -> np.ndarray:
        return self._codes

    def __len__(self) -> int:
        return len(self.points)

    def point_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in p) for p in self.points}


@dataclass(frozen=True)
class NodeAddress:
    level: int
    morton: int

    @property
    def origin(self) -> np.ndarray:
        """Global integer coordinate of the cell's minimum corner."""
        nbits = max(self.morton.bit_length(), 1)
        depth = (nbits + 2) // 3
        return np.array(morton_decode(self.morton, depth), dtype=np.int64) << self.level

    def child(self, octant: int) -> "NodeAddress":
        return NodeAddress(self.level - 1, (self.morton << 3) | octant)

    def parent(self) -> "NodeAddress":
        return NodeAddress(self.level + 1, self.morton >> 3)


def node_voxels(node: NodeAddress) -> np.ndarray:
    """All voxels of the node's cell as global coordinates, ascending Morton order."""
    if node.level < 1:
        raise DegenerateError("a level-0 node is a single voxel and carries no surfel")
    return local_voxel_grid(node.level) + node.origin


class OccupancyOctree:
    """Per-level sorted Morton codes of occupied cells and their octant masks.

    ``codes[l]`` lists the occupied cells of side ``2**l``; ``masks[l][i]`` is
    the 8-bit occupancy of the children of ``codes[l][i]`` (zero at level 0).
    """

    def __init__(self, depth: int, codes: list[np.ndarray], masks: list[np.ndarray]):
        self.depth = depth
        self.codes = codes
        self.masks = masks

    def __repr__(self):
        sizes = ", ".join(str(len(c)) for c in self.codes)
        return f"OccupancyOctree(depth={self.depth}, nodes per level=[{sizes}])"

    def n_nodes(self, level: int) -> int:
        return len(self.codes[level])

    def index_of(self, level: int, morton) -> np.ndarray:
        """Positions of the given codes within ``codes[level]`` (codes must exist)."""
        return np.searchsorted(self.codes[level], np.asarray(morton, dtype=np.uint64))

    def mask_of(self, level: int, morton: int) -> int:
        i = int(self.index_of(level, morton))
        if i >= len(self.codes[level]) or int(self.codes[level][i]) != morton:
            raise KeyError((level, morton))
        return int(self.masks[level][i])

    def parent_index(self, level: int) -> np.ndarray:
        """For each node at ``level``, the index of its parent at ``level + 1``."""
        return self.index_of(level + 1, self.codes[level] >> np.uint64(3))

    def nodes(self, level: int):
        for code in self.codes[level]:
            yield NodeAddress(level, int(code))


def build_octree(cloud: PointCloud) -> OccupancyOctree:
    if len(cloud) == 0:
        raise EmptyInputError("cannot build an octree from an empty cloud")
    codes = [cloud.codes]
    masks = [np.zeros(len(cloud), dtype=np.uint8)]
    three = np.uint64(3)
    for _ in range(cloud.depth):
        child = codes[-1]
        parent_of_child = child >> three
        parents, first = np.unique(parent_of_child, return_index=True)
        bits = (np.uint8(1) << (child & np.uint64(7)).astype(np.uint8)).astype(np.uint8)
        mask = np.bitwise_or.reduceat(bits, first).astype(np.uint8)
        codes.append(parents)
        masks.append(mask)
    return OccupancyOctree(cloud.depth, codes, masks)


def node_occupancy(cloud: PointCloud, level: int, node_codes: np.ndarray) -> np.ndarray:
    """Boolean ``(len(node_codes), 8**level)`` occupancy of each node's voxels.

    Columns follow the Morton order of :func:`local_voxel_grid`.
    """
    shift = np.uint64(3 * level)
    owner = cloud.codes >> shift
    local = (cloud.codes & np.uint64((1 << (3 * level)) - 1)).astype(np.int64)
    rows = np.searchsorted(node_codes, owner)
    keep = rows < len(node_codes)
    keep[keep] &= node_codes[rows[keep]] == owner[keep]
    occ = np.zeros((len(node_codes), 8 ** level), dtype=bool)
    occ[rows[keep], local[keep]] = True
    return occ
