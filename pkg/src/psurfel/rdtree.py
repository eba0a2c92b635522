"""Rate–distortion surfel/split decisions over the occupancy octree.

Decisions are taken by a bottom-up dynamic programme on Lagrangian costs
``lambda * D / ln 2 + bits``. Rates come from order-independent static
tables (:class:`RateModel`), so every node's local cost is known before the
tree is decided and the DP is exactly optimal under that proxy.

:class:`ProbTree` holds soft split probabilities and their marginals; it is
an analysis utility used to cross-check the hard decisions.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .entropy import (PROB_CEIL, PROB_FLOOR, PROB_ONE, ParamQuantizer, StaticRateTable,
                      octant_contexts, param_contexts, popcount_bucket)
from .errors import DegenerateError, EmptyInputError
from .geometry import OccupancyOctree, PointCloud, build_octree, node_occupancy
from .surfel import FitConfig, FitResult, batch_distortion, fit_batch, sheet_variant

SURFEL = 1
SPLIT = 2
LN2 = math.log(2.0)
DEFAULT_TOP = 3
DEFAULT_FLOOR = 1
DEFAULT_EPSILON = 0.01

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def popcount(mask) -> np.ndarray:
    return _POPCOUNT[np.asarray(mask, dtype=np.int64)]


def check_levels(depth: int, top: int, floor: int) -> None:
    if not 1 <= floor <= top:
        raise ValueError(f"need 1 <= floor <= L, got floor={floor}, L={top}")
    if depth < top + 1:
        raise ValueError(f"cloud depth {depth} must be at least L + 1 = {top + 1}")


# --------------------------------------------------------------------------
# λ-independent candidate data

@dataclass
class LevelFit:
    """Candidate surfels for every octree node of one level.

    Each node has ``V`` candidate parameter tuples (variant 0 is the fit,
    variant 1 its canonical sheet form); arrays are indexed ``[variant, node]``.
    Distortions are evaluated at the dequantised parameters.
    """

    fit: FitResult
    indices: np.ndarray          # (V, n, 11) quantised tuples
    clamped: np.ndarray          # (V, n) quantiser clamped some field
    distortion: np.ndarray       # (V, n) nats

    @property
    def n_variants(self) -> int:
        return self.indices.shape[0]


@dataclass
class CandidateSet:
    """Everything the decision stage needs that does not depend on lambda."""

    cloud: PointCloud
    octree: OccupancyOctree
    top: int
    floor: int
    quantizer: ParamQuantizer
    fits: dict[int, LevelFit]
    buckets: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return self.octree.depth


def parent_buckets(octree: OccupancyOctree, level: int) -> np.ndarray:
    """Popcount bucket of each node's parent mask (the root counts as bucket 0)."""
    if level == octree.depth:
        return np.zeros(octree.n_nodes(level), dtype=np.int64)
    parent_masks = octree.masks[level + 1][octree.parent_index(level)]
    return popcount_bucket(popcount(parent_masks))


def resolve_workers(workers: int | None = None) -> int:
    """Worker count: the explicit value or the CPU count, capped by ``PSURFEL_THREADS`` when set."""
    import os
    n = int(workers) if workers is not None else (os.cpu_count() or 1)
    env = os.environ.get("PSURFEL_THREADS")
    if env:
        n = min(n, int(env))
    return max(1, n)


def fit_level(cloud: PointCloud, octree: OccupancyOctree, level: int, config: FitConfig,
              quantizer: ParamQuantizer, executor=None) -> LevelFit:
    occ = node_occupancy(cloud, level, octree.codes[level])
    fit = fit_batch(level, occ, config, executor)
    variants = [(fit.mu, fit.sigma, fit.quat, fit.beta)]
    if len(occ):
        variants.append(sheet_variant(level, fit.mu, fit.sigma, fit.quat, fit.beta,
                                      quantizer.widest_sigma(level)))
    else:
        variants.append(variants[0])
    indices, clamped, dist = [], [], []
    for params in variants:
        idx, clamp = quantizer.quantize_arrays(level, *params)
        indices.append(idx)
        clamped.append(clamp)
        dist.append(batch_distortion(level, occ, *quantizer.dequantize_arrays(level, idx), config.p_min))
    return LevelFit(fit, np.stack(indices), np.stack(clamped), np.stack(dist))


def prepare_candidates(cloud: PointCloud, top: int = DEFAULT_TOP, floor: int = DEFAULT_FLOOR,
                       fit_config: FitConfig = FitConfig(),
                       quantizer: ParamQuantizer = ParamQuantizer(),
                       workers: int | None = None) -> CandidateSet:
    """Build the octree and fit a surfel on every node of levels ``floor..L``."""
    if len(cloud) == 0:
        raise EmptyInputError("cannot code an empty cloud")
    check_levels(cloud.depth, top, floor)
    octree = build_octree(cloud)
    n_workers = resolve_workers(workers)
    fits = {}
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            for level in range(floor, top + 1):
                fits[level] = fit_level(cloud, octree, level, fit_config, quantizer, pool)
    else:
        for level in range(floor, top + 1):
            fits[level] = fit_level(cloud, octree, level, fit_config, quantizer)
    buckets = {l: parent_buckets(octree, l) for l in range(floor, octree.depth + 1)}
    return CandidateSet(cloud, octree, top, floor, quantizer, fits, buckets)


# --------------------------------------------------------------------------
# rate model

def _clip_prob(p: float) -> float:
    return min(max(p, PROB_FLOOR / PROB_ONE), PROB_CEIL / PROB_ONE)


@dataclass
class RateModel:
    """Static bit estimates for octant masks, surfel parameters and decision flags.

    ``flag_split`` maps each flagged level to the probability of SPLIT.
    """

    octants: StaticRateTable
    params: dict[int, StaticRateTable]
    flag_split: dict[int, float]
    quantizer: ParamQuantizer

    def octant_bits(self, level: int, bucket, mask) -> np.ndarray:
        ctx, bits = octant_contexts(level, bucket, mask)
        return self.octants.bits(ctx, bits)

    def param_bits(self, level: int, indices) -> np.ndarray:
        ctx, bits = param_contexts(self.quantizer, indices)
        return self.params[level].bits(ctx, bits)

    def flag_bits(self, level: int, split: bool) -> float:
        p = self.flag_split.get(level)
        if p is None:
            return 0.0
        return -math.log2(p if split else 1.0 - p)

    def with_flags(self, flag_split: dict[int, float]) -> "RateModel":
        return RateModel(self.octants, self.params, dict(flag_split), self.quantizer)


def build_rate_model(cands: CandidateSet) -> RateModel:
    """Per-context frequencies over all candidate symbols, flags at probability 1/2."""
    octree = cands.octree
    ctx_parts, bit_parts = [], []
    for level in range(cands.floor + 1, cands.depth + 1):
        ctx, bits = octant_contexts(level, cands.buckets[level], octree.masks[level])
        ctx_parts.append(ctx.ravel())
        bit_parts.append(bits.ravel())
    n_octant_ctx = (cands.depth + 1) * 3 * 255
    octants = StaticRateTable(n_octant_ctx, np.concatenate(ctx_parts), np.concatenate(bit_parts))
    params = {}
    per_level = sum((1 << b) - 1 for b in cands.quantizer.field_bits)
    for level, lf in cands.fits.items():
        ctx, bits = param_contexts(cands.quantizer, lf.indices.reshape(-1, 11))
        params[level] = StaticRateTable(per_level, ctx, bits)
    flags = {l: 0.5 for l in range(cands.floor + 1, cands.top + 1)}
    return RateModel(octants, params, flags, cands.quantizer)


# --------------------------------------------------------------------------
# costs and the decision DP

@dataclass
class NodeCosts:
    """Local costs per level, aligned with ``octree.codes[level]``.

    ``surfel[l]`` exists for levels ``floor..L``; ``split[l]`` for levels above
    the floor (above L it is the octant bits alone). ``choice[l]`` names the
    candidate variant behind each ``surfel[l]`` entry.
    """

    lam: float
    floor: int
    top: int
    depth: int
    surfel: dict[int, np.ndarray]
    split: dict[int, np.ndarray]
    choice: dict[int, np.ndarray] = field(default_factory=dict)


def variant_costs(lf: LevelFit, level: int, lam: float, rates: RateModel) -> np.ndarray:
    """``(V, n)`` surfel-only costs ``lambda * D / ln 2 + parameter bits`` of every variant."""
    n = lf.indices.shape[1]
    bits = rates.param_bits(level, lf.indices.reshape(-1, 11)).reshape(lf.n_variants, n)
    return lam * lf.distortion / LN2 + bits


def level_costs(cands: CandidateSet, lam: float, rates: RateModel) -> NodeCosts:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    octree = cands.octree
    surfel, split, choice = {}, {}, {}
    for level in range(cands.floor, cands.top + 1):
        vc = variant_costs(cands.fits[level], level, lam, rates)
        choice[level] = np.argmin(vc, axis=0)  # ties go to the lowest variant
        surfel[level] = (np.take_along_axis(vc, choice[level][None], axis=0)[0]
                         + rates.flag_bits(level, False))
    for level in range(cands.floor + 1, cands.depth + 1):
        split[level] = (rates.flag_bits(level, True)
                        + rates.octant_bits(level, cands.buckets[level], octree.masks[level]))
    return NodeCosts(lam, cands.floor, cands.top, cands.depth, surfel, split, choice)


def node_costs(cands: CandidateSet, level: int, index: int, lam: float,
               rates: RateModel) -> tuple[float, float]:
    """``(cost_surfel, cost_split_local)`` of one node in bit-equivalent units."""
    if level < 1:
        raise DegenerateError("level-0 nodes carry no decision")
    if not cands.floor <= level <= cands.top:
        raise ValueError(f"level {level} is outside the decidable range")
    lf = cands.fits[level]
    cs = min(lam * float(lf.distortion[v, index]) / LN2
             + float(rates.param_bits(level, lf.indices[v, index:index + 1])[0])
             for v in range(lf.n_variants)) + rates.flag_bits(level, False)
    if level == cands.floor:
        return cs, math.inf
    mask = cands.octree.masks[level][index]
    cp = rates.flag_bits(level, True) + float(
        rates.octant_bits(level, cands.buckets[level][index], mask)[0])
    return cs, cp


@dataclass
class LevelNodes:
    """Existing nodes of one level of a decided tree, in Morton order."""

    codes: np.ndarray
    split: np.ndarray
    masks: np.ndarray
    params: np.ndarray  # (n_surfel, 11) quantised tuples of the SURFEL nodes, in order

    def __eq__(self, other):
        if not isinstance(other, LevelNodes):
            return NotImplemented
        return (np.array_equal(self.codes, other.codes) and np.array_equal(self.split, other.split)
                and np.array_equal(self.masks, other.masks)
                and np.array_equal(self.params.reshape(-1, 11), other.params.reshape(-1, 11)))


@dataclass
class DecidedTree:
    """Surfel/split decisions for every existing node from the root to the floor.

    ``status`` (optional) gives per-level decisions aligned with the full
    occupancy octree: 0 absent, :data:`SURFEL` or :data:`SPLIT`.
    """

    depth: int
    top: int
    floor: int
    levels: dict[int, LevelNodes]
    lam: float | None = None
    status: dict[int, np.ndarray] | None = field(default=None, repr=False)
    choice: dict[int, np.ndarray] | None = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, DecidedTree):
            return NotImplemented
        return ((self.depth, self.top, self.floor) == (other.depth, other.top, other.floor)
                and self.levels.keys() == other.levels.keys()
                and all(self.levels[l] == other.levels[l] for l in self.levels))

    def counts(self) -> dict[int, tuple[int, int]]:
        """Per level: ``(n_surfel, n_split)``."""
        return {l: (int((~n.split).sum()), int(n.split.sum())) for l, n in self.levels.items()}

    def leaves(self):
        """Yield ``(level, codes, params)`` for the SURFEL nodes of each level."""
        for level in sorted(self.levels, reverse=True):
            n = self.levels[level]
            if (~n.split).any():
                yield level, n.codes[~n.split], n.params

    def surfel_levels(self) -> list[int]:
        return [l for l, (s, _) in self.counts().items() if s > 0]


def _children_sum(values: np.ndarray, parent_idx: np.ndarray, n_parents: int) -> np.ndarray:
    out = np.zeros(n_parents)
    np.add.at(out, parent_idx, values)
    return out


def solve(costs: NodeCosts, octree: OccupancyOctree) -> dict[int, np.ndarray]:
    """Bottom-up DP; returns per-level decision status aligned with the octree."""
    choose_split = {}
    best = costs.surfel[costs.floor]
    for level in range(costs.floor + 1, costs.depth + 1):
        below = _children_sum(best, octree.parent_index(level - 1), octree.n_nodes(level))
        split_total = costs.split[level] + below
        if level > costs.top:
            choose_split[level] = np.ones(octree.n_nodes(level), dtype=bool)
            best = split_total
        else:
            cs = costs.surfel[level]
            choose_split[level] = split_total < cs  # ties go to SURFEL
            best = np.where(choose_split[level], split_total, cs)
    status = {}
    alive = np.ones(1, dtype=bool)
    for level in range(costs.depth, costs.floor - 1, -1):
        if level < costs.depth:
            parent = octree.parent_index(level)
            alive = (status[level + 1][parent] == SPLIT)
        split = choose_split.get(level, np.zeros(octree.n_nodes(level), dtype=bool))
        status[level] = np.where(alive, np.where(split, SPLIT, SURFEL), 0).astype(np.int8)
    return status


def tree_from_status(cands: CandidateSet, status: dict[int, np.ndarray],
                     lam: float | None = None,
                     choice: dict[int, np.ndarray] | None = None) -> DecidedTree:
    """Collect a decided tree; ``choice`` picks the variant of each SURFEL node (default 0)."""
    octree = cands.octree
    if choice is None:
        choice = {l: np.zeros(lf.indices.shape[1], dtype=np.int64) for l, lf in cands.fits.items()}
    levels = {}
    for level, st in status.items():
        keep = st > 0
        split = st[keep] == SPLIT
        masks = np.where(split, octree.masks[level][keep], 0).astype(np.uint8)
        if level in cands.fits:
            surf = np.flatnonzero(st == SURFEL)
            params = cands.fits[level].indices[choice[level][surf], surf]
        else:
            params = np.zeros((0, 11), dtype=np.int64)
        levels[level] = LevelNodes(octree.codes[level][keep], split, masks, params)
    return DecidedTree(octree.depth, cands.top, cands.floor, levels, lam, status, choice)


def flag_frequencies(status: dict[int, np.ndarray], floor: int, top: int) -> dict[int, float]:
    out = {}
    for level in range(floor + 1, top + 1):
        st = status[level]
        n_split = int((st == SPLIT).sum())
        n = int((st > 0).sum())
        out[level] = _clip_prob((n_split + 0.5) / (n + 1.0))
    return out


def decide_tree(cands: CandidateSet, lam: float, rates: RateModel | None = None,
                refine_flags: bool = True) -> tuple[DecidedTree, RateModel]:
    """Rate–distortion optimal decisions under the static rate model.

    With ``refine_flags`` the flag probabilities are re-estimated from a
    first solve and the DP is run once more under the refined model. The
    returned rate model is the one the returned tree is optimal for.
    """
    if rates is None:
        rates = build_rate_model(cands)
    costs = level_costs(cands, lam, rates)
    status = solve(costs, cands.octree)
    if refine_flags:
        rates = rates.with_flags(flag_frequencies(status, cands.floor, cands.top))
        costs = level_costs(cands, lam, rates)
        status = solve(costs, cands.octree)
    return tree_from_status(cands, status, lam, costs.choice), rates


def cost_vector(status: dict[int, np.ndarray], costs: NodeCosts) -> np.ndarray:
    """Local cost of every candidate node in canonical order (levels top-down, Morton order).

    Absent nodes contribute exact zeros.
    """
    parts = []
    for level in range(costs.depth, costs.floor - 1, -1):
        st = status[level]
        local = np.zeros(len(st))
        if level in costs.split:
            local = np.where(st == SPLIT, costs.split[level], local)
        if level in costs.surfel:
            local = np.where(st == SURFEL, costs.surfel[level], local)
        parts.append(local)
    return np.concatenate(parts)


def total_cost(status: dict[int, np.ndarray], costs: NodeCosts) -> float:
    """Sequential left-to-right sum of :func:`cost_vector`."""
    vec = cost_vector(status, costs)
    return float(np.cumsum(vec)[-1]) if len(vec) else 0.0


def realized_totals(tree: DecidedTree, cands: CandidateSet, rates: RateModel) -> dict[str, float]:
    """Distortion (nats) and estimated bits of a decided tree, split by category."""
    status = tree.status
    dist = param = octant = flag = 0.0
    for level, st in status.items():
        surf = st == SURFEL
        spl = st == SPLIT
        if level in cands.fits:
            lf = cands.fits[level]
            rows = np.flatnonzero(surf)
            var = tree.choice[level][rows] if tree.choice else np.zeros(len(rows), dtype=np.int64)
            dist += math.fsum(lf.distortion[var, rows])
            param += math.fsum(rates.param_bits(level, lf.indices[var, rows]))
        if level > cands.floor:
            octant += math.fsum(rates.octant_bits(level, cands.buckets[level][spl],
                                                  cands.octree.masks[level][spl]))
        if cands.floor < level <= cands.top:
            flag += int(spl.sum()) * rates.flag_bits(level, True) + int(surf.sum()) * rates.flag_bits(level, False)
    return {"distortion": dist, "param_bits": param, "octant_bits": octant, "flag_bits": flag,
            "rate_bits": param + octant + flag}


# --------------------------------------------------------------------------
# soft decisions

class ProbTree:
    """Conditional split probabilities on a forest of nodes, levels top-down.

    ``parents[k]`` maps each node of row ``k`` (``k >= 1``) to its parent in
    row ``k - 1``; row 0 holds the roots (the cut level). ``p[k]`` are the
    conditional split probabilities.
    """

    def __init__(self, parents: list[np.ndarray], p: list[np.ndarray]):
        if len(parents) != len(p):
            raise ValueError("parents and p need one entry per row")
        self.parents = [np.asarray(a, dtype=np.int64) for a in parents]
        self.p = [np.asarray(a, dtype=np.float64) for a in p]
        for row in self.p:
            if np.any((row < 0) | (row > 1)):
                raise ValueError("conditional probabilities must lie in [0, 1]")
        self.p_tilde: list[np.ndarray] | None = None
        self.q_tilde: list[np.ndarray] | None = None

    @property
    def n_rows(self) -> int:
        return len(self.p)

    @classmethod
    def from_status(cls, octree: OccupancyOctree, status: dict[int, np.ndarray],
                    top: int, floor: int) -> "ProbTree":
        """Hard tree (p in {0, 1}) over all octree nodes of levels ``floor..L``."""
        parents, p = [], []
        for level in range(top, floor - 1, -1):
            parents.append(np.zeros(octree.n_nodes(level), dtype=np.int64) if level == top
                           else octree.parent_index(level))
            p.append((status[level] == SPLIT).astype(np.float64))
        return cls(parents, p)


def marginal_probabilities(tree: ProbTree) -> ProbTree:
    """Fill ``p_tilde`` (reach-and-split) and ``q_tilde`` (reach-and-terminate).

    At the top row ``p_tilde = p``; below, ``p_tilde = p * p_tilde[parent]`` and
    ``q_tilde = (1 - p) * p_tilde[parent]``.
    """
    pt, qt = [], []
    for k, p in enumerate(tree.p):
        reach = np.ones_like(p) if k == 0 else pt[k - 1][tree.parents[k]]
        pt.append(p * reach)
        qt.append((1.0 - p) * reach)
    tree.p_tilde, tree.q_tilde = pt, qt
    return tree


def expected_loss(tree: ProbTree, distortion: list[np.ndarray], bits: list[np.ndarray],
                  n_points: int) -> tuple[float, float]:
    """Expected per-point distortion and octree rate: ``(sum q~ D / N, sum p~ B / N)``."""
    if n_points <= 0:
        raise EmptyInputError("N must be positive")
    if tree.p_tilde is None:
        marginal_probabilities(tree)
    d = math.fsum(float(v) for q, dd in zip(tree.q_tilde, distortion) for v in q * dd)
    b = math.fsum(float(v) for p, bb in zip(tree.p_tilde, bits) for v in p * bb)
    return d / n_points, b / n_points


def epsilon_terminate(tree: ProbTree, epsilon: float = DEFAULT_EPSILON) -> list[np.ndarray]:
    """Top-down hard decisions: SURFEL where ``q~ >= 1 - eps`` (and on the last row), else SPLIT.

    Returns per-row status arrays (0 for nodes below a terminated ancestor).
    """
    if not 0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    if tree.q_tilde is None:
        marginal_probabilities(tree)
    out = []
    last = tree.n_rows - 1
    for k, q in enumerate(tree.q_tilde):
        alive = np.ones(len(q), dtype=bool) if k == 0 else out[k - 1][tree.parents[k]] == SPLIT
        terminate = (q >= 1.0 - epsilon) | (k == last)
        out.append(np.where(alive, np.where(terminate, SURFEL, SPLIT), 0).astype(np.int8))
    return out
