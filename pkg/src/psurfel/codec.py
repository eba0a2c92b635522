"""Bitstream framing, tree serialisation, voxelisation and binarisation.

Stream layout (little-endian)::

    "SFLS" | version u8 | depth u8 | L u8 | floor u8 | N u32 | rho u16 (x 2**10)
           | quantiser (4 x u8 widths, 3 x f64 ranges) | lambda tag u8 | coded body

The body visits levels from the root down to the floor and, within a level,
the existing nodes in Morton order: a decision flag on levels in
``(floor, L]``, then an octant mask for SPLIT nodes or a quantised parameter
tuple for SURFEL nodes.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .entropy import (AdaptiveBitModel, OctantModels, ParamModels, ParamQuantizer, RangeDecoder,
                      RangeEncoder, decode_octants, decode_params, encode_octants, encode_params,
                      estimate_bits, popcount_bucket)
from .errors import CorruptStreamError, DegenerateError, EmptySelectionError, TruncatedStreamError
from .geometry import PointCloud, build_octree, morton_decode_array
from .rdtree import (DEFAULT_FLOOR, DEFAULT_TOP, SURFEL, CandidateSet, DecidedTree, LevelNodes,
                     RateModel, check_levels, decide_tree, prepare_candidates, realized_totals)
from .surfel import FitConfig, batch_probability

MAGIC = b"SFLS"
VERSION = 1
RHO_SCALE = 1 << 10
_HEAD = struct.Struct("<4sBBBBIH")
HEADER_SIZE = _HEAD.size + ParamQuantizer.SERIALIZED_SIZE + 1


@dataclass(frozen=True)
class CodecConfig:
    lam: float = 1.0
    top: int = DEFAULT_TOP
    floor: int = DEFAULT_FLOOR
    rho: float = 1.0
    fit: FitConfig = FitConfig()
    quantizer: ParamQuantizer = ParamQuantizer()
    workers: int | None = None
    report_d1: bool = True

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if not 0 < round(self.rho * RHO_SCALE) <= 0xFFFF:
            raise ValueError(f"rho must lie in (0, {0xFFFF / RHO_SCALE:.3f}]")
        if not 1 <= self.floor <= self.top:
            raise ValueError("need 1 <= floor <= L")

    @property
    def rho_fixed(self) -> int:
        return int(round(self.rho * RHO_SCALE))

    @property
    def lam_tag(self) -> int:
        return int(min(255, max(0, round(self.lam * 10))))


@dataclass(frozen=True)
class Header:
    depth: int
    top: int
    floor: int
    n_points: int
    rho_fixed: int
    quantizer: ParamQuantizer
    lam_tag: int
    version: int = VERSION

    @property
    def rho(self) -> float:
        return self.rho_fixed / RHO_SCALE

    @property
    def target_count(self) -> int:
        """``floor(rho * N)`` in exact integer arithmetic."""
        return (self.rho_fixed * self.n_points) >> 10

    def pack(self) -> bytes:
        return (_HEAD.pack(MAGIC, self.version, self.depth, self.top, self.floor, self.n_points,
                           self.rho_fixed)
                + self.quantizer.to_bytes() + bytes([self.lam_tag]))

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < HEADER_SIZE:
            raise TruncatedStreamError("stream shorter than its header")
        magic, version, depth, top, floor, n, rho = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise CorruptStreamError("bad magic")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported version {version}")
        if not (1 <= floor <= top and top + 1 <= depth <= 16) or n == 0 or rho == 0:
            raise CorruptStreamError("inconsistent header fields")
        q = ParamQuantizer.from_bytes(data[_HEAD.size:_HEAD.size + ParamQuantizer.SERIALIZED_SIZE])
        return cls(depth, top, floor, n, rho, q, data[HEADER_SIZE - 1], version)


# --------------------------------------------------------------------------
# body coding

class _Models:
    def __init__(self, header: Header):
        self.octants = OctantModels(header.depth)
        self.params = ParamModels(header.quantizer, range(header.floor, header.top + 1))
        self.flags = {l: AdaptiveBitModel() for l in range(header.floor + 1, header.top + 1)}


class _Tally:
    """Encoder wrapper accumulating ideal code lengths per symbol category."""

    def __init__(self, coder: RangeEncoder):
        self.coder = coder
        self.bits = {"octree": 0.0, "surfel": 0.0, "flag": 0.0}
        self.category = "octree"

    def encode(self, model, bit):
        self.bits[self.category] += estimate_bits(model, bit)
        self.coder.encode(model, bit)


def _write_body(tree: DecidedTree, header: Header) -> tuple[bytes, dict[str, float]]:
    models = _Models(header)
    tally = _Tally(RangeEncoder())
    parent_pop = {header.depth: np.ones(1, dtype=np.int64)}
    for level in range(header.depth, header.floor - 1, -1):
        nodes = tree.levels[level]
        buckets = popcount_bucket(parent_pop[level])
        p_row = 0
        for i in range(len(nodes.codes)):
            split = bool(nodes.split[i])
            if header.floor < level <= header.top:
                tally.category = "flag"
                tally.encode(models.flags[level], int(split))
            if split:
                tally.category = "octree"
                encode_octants(tally, models.octants, level, int(buckets[i]), int(nodes.masks[i]))
            elif level <= header.top:
                tally.category = "surfel"
                encode_params(tally, models.params, level, nodes.params[p_row])
                p_row += 1
            else:
                raise ValueError("nodes above the cut level must split")
        if level > header.floor:
            masks = nodes.masks[nodes.split].astype(np.int64)
            parent_pop[level - 1] = np.repeat(_popcounts(masks), _popcounts(masks))
    return tally.coder.finish(), tally.bits


def _popcounts(masks: np.ndarray) -> np.ndarray:
    return np.array([bin(int(m)).count("1") for m in masks], dtype=np.int64)


def _children(codes: np.ndarray, masks: np.ndarray) -> np.ndarray:
    out = []
    for code, mask in zip(codes.tolist(), masks.tolist()):
        base = code << 3
        out.extend(base | j for j in range(8) if (mask >> j) & 1)
    return np.array(out, dtype=np.uint64)


def _read_body(data: bytes, header: Header) -> DecidedTree:
    models = _Models(header)
    dec = RangeDecoder(data, HEADER_SIZE)
    levels = {}
    codes = np.zeros(1, dtype=np.uint64)
    pops = np.ones(1, dtype=np.int64)
    for level in range(header.depth, header.floor - 1, -1):
        n = len(codes)
        split = np.zeros(n, dtype=bool)
        masks = np.zeros(n, dtype=np.uint8)
        params = []
        buckets = popcount_bucket(pops)
        for i in range(n):
            if level > header.top:
                s = 1
            elif level > header.floor:
                s = dec.decode(models.flags[level])
            else:
                s = 0
            if s:
                split[i] = True
                masks[i] = decode_octants(dec, models.octants, level, int(buckets[i]))
            else:
                params.append(decode_params(dec, models.params, level))
        levels[level] = LevelNodes(codes, split, masks,
                                   np.array(params, dtype=np.int64).reshape(-1, 11))
        if level > header.floor:
            split_masks = masks[split]
            codes = _children(codes[split], split_masks)
            pc = _popcounts(split_masks)
            pops = np.repeat(pc, pc)
    return DecidedTree(header.depth, header.top, header.floor, levels)


# --------------------------------------------------------------------------
# reconstruction

@dataclass
class Candidates:
    """Voxel candidates of all surfel leaves: global coordinates, probability, Morton code."""

    points: np.ndarray
    prob: np.ndarray
    codes: np.ndarray

    def __len__(self):
        return len(self.prob)


def voxelize_leaf(level: int, morton: int, params, depth: int | None = None) -> Candidates:
    """Candidates for one leaf. ``params`` is a :class:`SurfelParams` (ignored at level 0)."""
    if level == 0:
        code = np.array([morton], dtype=np.uint64)
        pts = morton_decode_array(code, depth or 16)
        return Candidates(pts, np.ones(1), code)
    return voxelize_level(level, np.array([morton], dtype=np.uint64),
                          np.atleast_2d(params.mu), np.atleast_2d(params.sigma),
                          np.atleast_2d(params.quat), np.atleast_1d(params.beta), depth)


def voxelize_level(level: int, codes: np.ndarray, mu, sigma, quat, beta,
                   depth: int | None = None) -> Candidates:
    if level < 1:
        raise DegenerateError("surfel leaves live on level >= 1")
    codes = np.asarray(codes, dtype=np.uint64)
    prob = batch_probability(level, mu, sigma, quat, beta) if len(codes) else np.zeros((0, 8 ** level))
    n_local = 8 ** level
    full = (codes[:, None] << np.uint64(3 * level)) | np.arange(n_local, dtype=np.uint64)[None, :]
    full = full.ravel()
    if depth is None:
        depth = max(1, (int(full.max()).bit_length() + 2) // 3) if len(full) else 1
    return Candidates(morton_decode_array(full, depth), prob.ravel(), full)


def reconstruct_candidates(tree: DecidedTree, quantizer: ParamQuantizer) -> Candidates:
    parts = []
    for level, codes, params in tree.leaves():
        mu, sigma, quat, beta = quantizer.dequantize_arrays(level, params)
        parts.append(voxelize_level(level, codes, mu, sigma, quat, beta, tree.depth))
    if not parts:
        return Candidates(np.zeros((0, 3), dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.uint64))
    return Candidates(np.concatenate([c.points for c in parts]),
                      np.concatenate([c.prob for c in parts]),
                      np.concatenate([c.codes for c in parts]))


def select_top(prob: np.ndarray, codes: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest probabilities, ties by ascending code."""
    order = np.lexsort((codes, -prob))
    return order[:count]


def binarize(candidates: Candidates, n_points: int, rho: float, depth: int) -> PointCloud:
    """Keep the ``floor(rho * N)`` most probable candidates (all of them if fewer)."""
    target = int(math.floor(rho * n_points))
    return binarize_count(candidates, target, depth)


def binarize_count(candidates: Candidates, target: int, depth: int) -> PointCloud:
    if target <= 0:
        raise EmptySelectionError("rho * N rounds down to zero points")
    if len(candidates) == 0:
        raise EmptySelectionError("no candidates to select from")
    keep = select_top(candidates.prob, candidates.codes, min(target, len(candidates)))
    return PointCloud(depth, candidates.points[keep])


# --------------------------------------------------------------------------
# public API

@dataclass
class EncodeResult:
    data: bytes
    tree: DecidedTree
    header: Header
    stats: dict = field(default_factory=dict)
    reconstruction: PointCloud | None = None

    @property
    def bpp(self) -> float:
        return len(self.data) * 8 / self.header.n_points


def encode_tree(tree: DecidedTree, header: Header) -> tuple[bytes, dict[str, float]]:
    body, bits = _write_body(tree, header)
    return header.pack() + body, bits


def encode(cloud: PointCloud, config: CodecConfig = CodecConfig(),
           candidates: CandidateSet | None = None) -> EncodeResult:
    """Encode ``cloud``. Passing precomputed ``candidates`` (from
    :func:`prepare_candidates` with the same levels, fit and quantiser) skips
    the fitting stage, which does not depend on lambda."""
    check_levels(cloud.depth, config.top, config.floor)
    if candidates is None:
        candidates = prepare_candidates(cloud, config.top, config.floor, config.fit,
                                        config.quantizer, config.workers)
    elif (candidates.top, candidates.floor, candidates.quantizer) != (config.top, config.floor, config.quantizer):
        raise ValueError("candidate set was prepared with a different configuration")
    tree, rates = decide_tree(candidates, config.lam)
    header = Header(cloud.depth, config.top, config.floor, len(cloud), config.rho_fixed,
                    config.quantizer, config.lam_tag)
    data, bits = encode_tree(tree, header)
    stats = _stats(tree, candidates, rates, bits, len(data), len(cloud))
    rec = None
    if config.report_d1:
        from .metrics import d1_psnr
        rec = binarize_count(reconstruct_candidates(tree, config.quantizer), header.target_count,
                             cloud.depth)
        stats["d1_db"] = d1_psnr(cloud, rec)
    return EncodeResult(data, tree, header, stats, rec)


def _stats(tree: DecidedTree, cands: CandidateSet, rates: RateModel, bits: dict, n_bytes: int,
           n_points: int) -> dict:
    est = realized_totals(tree, cands, rates)
    clamped = 0
    for level, lf in cands.fits.items():
        rows = np.flatnonzero(tree.status[level] == SURFEL)
        clamped += int(lf.clamped[tree.choice[level][rows], rows].sum())
    return {
        "bytes": n_bytes,
        "bpp": n_bytes * 8 / n_points,
        "header_bits": HEADER_SIZE * 8,
        "octree_bits": bits["octree"],
        "surfel_bits": bits["surfel"],
        "flag_bits": bits["flag"],
        "levels": tree.counts(),
        "distortion_nats": est["distortion"],
        "estimated_rate_bits": est["rate_bits"],
        "clamped_params": clamped,
    }


def decode_header(data: bytes) -> Header:
    return Header.unpack(bytes(data[:HEADER_SIZE]))


def decode_tree(data: bytes) -> tuple[Header, DecidedTree]:
    header = decode_header(data)
    return header, _read_body(bytes(data), header)


def decode(data: bytes) -> PointCloud:
    header, tree = decode_tree(data)
    candidates = reconstruct_candidates(tree, header.quantizer)
    return binarize_count(candidates, header.target_count, header.depth)


def lossless_octree_bytes(cloud: PointCloud) -> bytes:
    """All octant masks from the root down to level 1 coded with the same
    context models and coder (plus a header of the same size): the all-voxel
    reference the surfel representation is compared against."""
    octree = build_octree(cloud)
    models = OctantModels(cloud.depth)
    enc = RangeEncoder()
    for level in range(cloud.depth, 0, -1):
        if level == cloud.depth:
            buckets = np.zeros(1, dtype=np.int64)
        else:
            parent_masks = octree.masks[level + 1][octree.parent_index(level)]
            buckets = popcount_bucket(_popcounts(parent_masks))
        for mask, b in zip(octree.masks[level].tolist(), buckets.tolist()):
            encode_octants(enc, models, level, b, mask)
    return bytes(HEADER_SIZE) + enc.finish()
