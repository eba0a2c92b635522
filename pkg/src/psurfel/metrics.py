"""Geometry quality metrics: D1/D2 PSNR, k-NN normals, BD-rate and RD curves.

PSNR follows the pc_error convention ``10 log10(3 peak^2 / mse)`` with the
symmetric maximum of the two directional mean squared errors. Nearest-neighbour
ties resolve to the lowest index so results are reproducible against a
brute-force search.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, NonOverlapError
from .geometry import PointCloud

PSNR_CAP = 999.0
DEFAULT_K = 9


def default_peak(cloud: PointCloud) -> float:
    return float((1 << cloud.depth) - 1)


def psnr(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(3.0 * peak * peak / mse))


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(pts) == 0:
        raise EmptyInputError("metric needs non-empty clouds")
    return np.asarray(pts, dtype=np.float64)


def nearest(source: np.ndarray, target: np.ndarray, k: int = 8) -> np.ndarray:
    """Index in ``target`` of each source point's nearest neighbour, lowest index on ties."""
    tree = cKDTree(target)
    k = min(k, len(target))
    dist, idx = tree.query(source, k=k)
    if k == 1:
        return np.asarray(idx, dtype=np.int64)
    tied = dist == dist[:, :1]
    out = np.where(tied, idx, len(target)).min(axis=1)
    # every returned neighbour tied: more equidistant points may exist beyond k
    for i in np.nonzero(tied[:, -1])[0]:
        cand = np.asarray(tree.query_ball_point(source[i], dist[i, 0] * (1 + 1e-12)), dtype=np.int64)
        d2 = np.sum((target[cand] - source[i]) ** 2, axis=1)
        out[i] = cand[d2 == d2.min()].min()
    return out


def _d1_mse(a: np.ndarray, b: np.ndarray) -> float:
    _, idx = cKDTree(b).query(a, k=1)
    diff = b[idx] - a  # exact squared distances (tree distances carry a sqrt)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def d1_mse(ref, rec) -> float:
    a, b = _points(ref), _points(rec)
    return max(_d1_mse(a, b), _d1_mse(b, a))


def d1_psnr(ref, rec, peak: float | None = None) -> float:
    """Symmetric point-to-point PSNR in dB (capped at 999)."""
    if peak is None:
        peak = default_peak(ref) if isinstance(ref, PointCloud) else None
    if peak is None:
        raise ValueError("peak required for raw point arrays")
    return psnr(d1_mse(ref, rec), peak)


def estimate_normals(cloud, k: int = DEFAULT_K) -> np.ndarray:
    """Unit normals from the covariance of each point's k nearest neighbours.

    The normal is the eigenvector of the smallest eigenvalue, oriented so its
    z component is positive (then y, then x for components that vanish). A
    neighbourhood with zero covariance falls back to ``(0, 0, 1)``.
    """
    pts = _points(cloud)
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(pts) < k:
        raise ValueError(f"need at least k={k} points")
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    degenerate = w[:, -1] <= 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    tol = 1e-9
    normals = _canonical_sign(normals, tol)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _canonical_sign(normals: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    out = normals.copy()
    decided = np.zeros(len(out), dtype=bool)
    for axis in (2, 1, 0):
        comp = out[:, axis]
        pick = ~decided & (np.abs(comp) > tol)
        out[pick & (comp < 0)] *= -1
        decided |= pick
    return out


def _d2_mse(src: np.ndarray, tgt: np.ndarray, normals_at_src, normals_at_tgt) -> float:
    idx = nearest(src, tgt)
    diff = tgt[idx] - src
    n = normals_at_src if normals_at_src is not None else normals_at_tgt[idx]
    proj = np.sum(diff * n, axis=1)
    return float(np.mean(proj * proj))


def d2_mse(ref, rec, normals: np.ndarray) -> float:
    a, b = _points(ref), _points(rec)
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != a.shape:
        raise ValueError("normals must have one row per reference point")
    # ref -> rec: project onto the reference point's normal;
    # rec -> ref: project onto the normal of the matched reference point
    return max(_d2_mse(a, b, normals, None), _d2_mse(b, a, None, normals))


def d2_psnr(ref, rec, normals: np.ndarray | None = None, peak: float | None = None,
            k: int = DEFAULT_K) -> float:
    """Symmetric point-to-plane PSNR in dB using reference normals."""
    if normals is None:
        normals = estimate_normals(ref, k)
    if peak is None:
        if not isinstance(ref, PointCloud):
            raise ValueError("peak required for raw point arrays")
        peak = default_peak(ref)
    return psnr(d2_mse(ref, rec, normals), peak)


# --------------------------------------------------------------------------
# RD curves

@dataclass(frozen=True)
class RdPoint:
    bpp: float
    d1_db: float
    d2_db: float


class RdCurve:
    """RD samples sorted by ascending bpp."""

    def __init__(self, points):
        pts = sorted(points, key=lambda p: p.bpp)
        for p in pts:
            if not p.bpp > 0:
                raise ValueError("bpp must be positive")
        self.points = pts

    def __len__(self):
        return len(self.points)

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def quality(self, metric: str = "d1") -> np.ndarray:
        return np.array([getattr(p, f"{metric}_db") for p in self.points])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bpp", "d1_db", "d2_db"])
            for p in self.points:
                w.writerow([f"{p.bpp:.6f}", f"{p.d1_db:.6f}", f"{p.d2_db:.6f}"])


def bd_rate(anchor: RdCurve, test: RdCurve, metric: str = "d1") -> float:
    """Average rate difference (percent) of ``test`` over ``anchor`` at equal quality.

    Log-rate is fitted as a cubic polynomial of PSNR for each curve and the
    difference is averaged over the overlapping PSNR interval.
    """
    if len(anchor) < 4 or len(test) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    qa, qt = anchor.quality(metric), test.quality(metric)
    ra, rt = np.log(anchor.rates()), np.log(test.rates())
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise NonOverlapError("RD curves do not overlap in quality")
    pa = np.polyint(np.polyfit(qa, ra, 3))
    pt = np.polyint(np.polyfit(qt, rt, 3))
    avg = ((np.polyval(pt, hi) - np.polyval(pt, lo)) - (np.polyval(pa, hi) - np.polyval(pa, lo))) / (hi - lo)
    return 100.0 * (math.exp(avg) - 1.0)
