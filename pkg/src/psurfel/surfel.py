"""Bounded generalized-Gaussian occupancy surfels.

A surfel assigns every voxel of its node an occupancy probability

    P(x) = exp(-0.5 * r(x) ** beta),   r(x)^2 = (x - mu)^T Sigma^-1 (x - mu)

so that ``beta = 2`` is exactly a Gaussian. Coordinates are node-local and a
voxel is evaluated at its integer corner coordinate.

Optimisation runs on an unconstrained 11-vector

    [mu (3), s (3), q (4), b]

with ``sigma = SIGMA_MIN + exp(s)``, ``quat = q / |q|`` and
``beta = BETA_MIN + (BETA_MAX - BETA_MIN) * sigmoid(b)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError
from .geometry import local_voxel_grid

SIGMA_MIN = 0.05
BETA_MIN = 0.5
BETA_MAX = 8.0
P_MIN = 1e-6
SIGMA_MAX_FACTOR = 4.0


@dataclass(frozen=True)
class SurfelParams:
    mu: np.ndarray
    sigma: np.ndarray
    quat: np.ndarray
    beta: float

    def __post_init__(self):
        quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        norm = float(np.sqrt(np.sum(quat * quat)))
        if norm == 0.0 or not np.isfinite(norm):
            raise DegenerateError("quaternion must be non-zero")
        object.__setattr__(self, "quat", quat / norm)
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(3))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64).reshape(3))
        object.__setattr__(self, "beta", float(self.beta))

    def __eq__(self, other):
        if not isinstance(other, SurfelParams):
            return NotImplemented
        return (np.array_equal(self.mu, other.mu) and np.array_equal(self.sigma, other.sigma)
                and np.array_equal(self.quat, other.quat) and self.beta == other.beta)

    __hash__ = None


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 300
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    p_min: float = P_MIN
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 < self.p_min < 0.5:
            raise ValueError("p_min must lie in (0, 0.5)")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True)
class NodeSample:
    """Evaluation points of a node (node-local, float) and their ground-truth occupancy."""

    points: np.ndarray = field(repr=False)
    occupancy: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        occ = np.asarray(self.occupancy, dtype=bool).reshape(-1)
        if len(pts) != len(occ):
            raise ValueError("points and occupancy differ in length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def from_grid(cls, level: int, occupancy) -> "NodeSample":
        """Sample over the full Morton-ordered voxel grid of a level-``level`` node."""
        return cls(local_voxel_grid(level).astype(np.float64), occupancy)


# --------------------------------------------------------------------------
# rotation / precision

def _rotation_from_unit(w, x, y, z):
    """Rotation matrices for (batched) unit quaternion components."""
    return np.stack([
        np.stack([w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z], -1),
    ], -2)


def rotation_from_quaternion(quat) -> np.ndarray:
    """3x3 rotation for quaternion ``(w, x, y, z)``; renormalises its input."""
    q = np.asarray(quat, dtype=np.float64).reshape(4)
    norm = float(np.sqrt(np.sum(q * q)))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateError("zero quaternion has no rotation")
    q = q / norm
    return _rotation_from_unit(*q)


def precision_matrix(sigma, quat, sigma_min: float = SIGMA_MIN) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64).reshape(3)
    if np.any(sigma < sigma_min):
        raise DegenerateError(f"sigma {sigma} below minimum {sigma_min}")
    R = rotation_from_quaternion(quat)
    return (R * sigma ** -2.0) @ R.T


def quaternion_from_rotation(R: np.ndarray) -> np.ndarray:
    """Batched ``(..., 3, 3)`` rotation to unit quaternion with non-negative ``w``."""
    R = np.asarray(R, dtype=np.float64)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    trace = m00 + m11 + m22
    cand = np.stack([
        np.stack([1 + trace, R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], -1),
        np.stack([R[..., 2, 1] - R[..., 1, 2], 1 + m00 - m11 - m22, R[..., 0, 1] + R[..., 1, 0],
                  R[..., 0, 2] + R[..., 2, 0]], -1),
        np.stack([R[..., 0, 2] - R[..., 2, 0], R[..., 0, 1] + R[..., 1, 0], 1 - m00 + m11 - m22,
                  R[..., 1, 2] + R[..., 2, 1]], -1),
        np.stack([R[..., 1, 0] - R[..., 0, 1], R[..., 0, 2] + R[..., 2, 0], R[..., 1, 2] + R[..., 2, 1],
                  1 - m00 - m11 + m22], -1),
    ], -2)
    diag = np.stack([trace, m00, m11, m22], -1)
    pick = np.argmax(diag, axis=-1)
    q = np.take_along_axis(cand, pick[..., None, None], axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def planarity_ratio(params: SurfelParams) -> float:
    s = np.sort(np.asarray(params.sigma, dtype=np.float64))[::-1]
    return float(min(s[0], s[1]) / s[2])


def sheet_variant(level: int, mu, sigma, quat, beta, sigma_wide: float):
    """Re-express B surfels as unbounded sheets in a canonical frame.

    Keeps each surfel's thin axis, thin-axis sigma and beta; sets both
    in-plane sigmas to ``sigma_wide``, aligns the in-plane frame with the
    projection of the x axis (y when the normal is close to x) and slides mu
    along the sheet to the foot of the node centre. Thin, wide surfels barely
    depend on the parameters this discards, and the canonical values are far
    cheaper to code.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    quat = np.atleast_2d(np.asarray(quat, dtype=np.float64))
    rows = np.arange(len(mu))
    R = _rotation_from_unit(*(quat / np.linalg.norm(quat, axis=1, keepdims=True)).T)
    thin = np.argmin(sigma, axis=1)
    n = R[rows, :, thin]
    lead = np.take_along_axis(n, np.argmax(np.abs(n), axis=1)[:, None], axis=1)
    n = n * np.sign(lead)
    ref = np.where((np.abs(n[:, 0]) > 0.9)[:, None], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0])
    u = ref - np.sum(ref * n, axis=1, keepdims=True) * n
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(n, u)
    quat_c = quaternion_from_rotation(np.stack([u, v, n], axis=-1))
    centre = np.full(3, (2.0 ** level - 1.0) / 2.0)
    mu_c = centre + np.sum((mu - centre) * n, axis=1, keepdims=True) * n
    mu_c = np.clip(mu_c, 0.0, 2.0 ** level)
    sigma_c = np.empty_like(sigma)
    sigma_c[:, 0:2] = sigma_wide
    sigma_c[:, 2] = sigma[rows, thin]
    return mu_c, sigma_c, quat_c, np.atleast_1d(np.asarray(beta, dtype=np.float64)).copy()


# --------------------------------------------------------------------------
# batched forward model
#
# Batched arrays use one (B, V) array per axis so that every reduction runs
# over a contiguous last axis; this keeps results bit-identical regardless of
# how many nodes share a batch.

class _Batch:
    """Forward quantities of B surfels evaluated on V points each."""

    def __init__(self, points, mu, sigma, unit_quat, beta, p_min):
        self.R = _rotation_from_unit(*(unit_quat[:, c] for c in range(4)))  # (B, 3, 3)
        if points.ndim == 2:
            d = [points[None, :, i] - mu[:, i, None] for i in range(3)]
        else:
            d = [points[:, :, i] - mu[:, i, None] for i in range(3)]
        R = self.R
        y = [d[0] * R[:, 0, a, None] + d[1] * R[:, 1, a, None] + d[2] * R[:, 2, a, None]
             for a in range(3)]
        t = [y[a] / sigma[:, a, None] for a in range(3)]
        u = t[0] * t[0] + t[1] * t[1] + t[2] * t[2]
        with np.errstate(divide="ignore"):
            log_u = np.log(u)
        s = np.exp((0.5 * beta)[:, None] * log_u)
        half_s = 0.5 * s
        self.prob = np.exp(-half_s)
        self.one_minus = -np.expm1(-half_s)
        self.d, self.t, self.u, self.log_u, self.s, self.half_s = d, t, u, log_u, s, half_s
        self.sigma, self.beta, self.p_min = sigma, beta, p_min
        # both -log P and -log(1 - P) are clamped to this range
        self.nll_lo = -math.log1p(-p_min)
        self.nll_hi = -math.log(p_min)

    def loss(self, occ) -> np.ndarray:
        with np.errstate(divide="ignore"):
            nll_empty = -np.log(self.one_minus)
        per_voxel = np.where(occ, self.half_s, nll_empty)
        np.clip(per_voxel, self.nll_lo, self.nll_hi, out=per_voxel)
        return per_voxel.sum(axis=1)

    def gradient(self, occ, raw_quat, sigma_min):
        """Gradient of :meth:`loss` w.r.t. the unconstrained 11-vector.

        Voxels whose probability is clamped contribute nothing.
        """
        prob, u, s = self.prob, self.u, self.s
        active = (self.half_s >= self.nll_lo) & (prob >= self.p_min)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(occ, 0.5, -0.5 * prob / self.one_minus)  # dD/ds
            cs = np.where(active, c * s, 0.0)
            e = np.where(active, cs * (0.5 * self.beta)[:, None] / u, 0.0)  # dD/du
            dbeta = 0.5 * np.where(active, cs * self.log_u, 0.0).sum(axis=1)
        sigma = self.sigma
        B = len(sigma)
        grad = np.empty((B, 11))
        et = [e * self.t[a] for a in range(3)]
        m = np.stack([et[a].sum(axis=1) / sigma[:, a] for a in range(3)], -1)
        R = self.R
        for i in range(3):
            grad[:, i] = -2.0 * (R[:, i, 0] * m[:, 0] + R[:, i, 1] * m[:, 1] + R[:, i, 2] * m[:, 2])
        for a in range(3):
            dsig = -2.0 / sigma[:, a] * (et[a] * self.t[a]).sum(axis=1)
            grad[:, 3 + a] = dsig * (sigma[:, a] - sigma_min)
        G = np.empty((B, 3, 3))
        for i in range(3):
            for a in range(3):
                G[:, i, a] = 2.0 * (et[a] * self.d[i]).sum(axis=1) / sigma[:, a]
        norm = np.sqrt(np.sum(raw_quat * raw_quat, axis=1))
        q = raw_quat / norm[:, None]
        dR = _rotation_jacobian(*(q[:, k] for k in range(4)))  # (B, 4, 3, 3)
        gq = (dR * G[:, None]).sum(axis=(2, 3))
        gq = (gq - q * np.sum(q * gq, axis=1, keepdims=True)) / norm[:, None]
        grad[:, 6:10] = gq
        frac = (self.beta - BETA_MIN) / (BETA_MAX - BETA_MIN)
        grad[:, 10] = dbeta * (BETA_MAX - BETA_MIN) * frac * (1.0 - frac)
        return grad


def _rotation_jacobian(w, x, y, z):
    dw = [[w, -z, y], [z, w, -x], [-y, x, w]]
    dx = [[x, y, z], [y, -x, -w], [z, w, -x]]
    dy = [[-y, x, w], [x, y, z], [-w, z, -y]]
    dz = [[-z, -w, x], [w, -z, y], [x, y, z]]
    return 2.0 * np.stack([np.stack([np.stack(row, -1) for row in m], -2) for m in (dw, dx, dy, dz)], 1)


# --------------------------------------------------------------------------
# unconstrained parameterisation

def _sigma_of(s):
    return SIGMA_MIN + np.exp(s)


def _beta_of(b):
    return BETA_MIN + (BETA_MAX - BETA_MIN) / (1.0 + np.exp(-b))


def to_unconstrained(params: SurfelParams) -> np.ndarray:
    theta = np.empty(11)
    theta[0:3] = params.mu
    theta[3:6] = np.log(np.maximum(params.sigma - SIGMA_MIN, 1e-12))
    theta[6:10] = params.quat
    frac = (params.beta - BETA_MIN) / (BETA_MAX - BETA_MIN)
    frac = min(max(frac, 1e-12), 1 - 1e-12)
    theta[10] = math.log(frac / (1.0 - frac))
    return theta


def from_unconstrained(theta) -> SurfelParams:
    theta = np.asarray(theta, dtype=np.float64)
    return SurfelParams(theta[0:3], _sigma_of(theta[3:6]), theta[6:10], float(_beta_of(theta[10])))


def _batch_from_params(points, mu, sigma, quat, beta, p_min):
    return _Batch(points, np.atleast_2d(mu), np.atleast_2d(sigma), np.atleast_2d(quat),
                  np.atleast_1d(np.asarray(beta, dtype=np.float64)), p_min)


# --------------------------------------------------------------------------
# public single-surfel API

def occupancy_probability(params: SurfelParams, x) -> np.ndarray | float:
    """Occupancy probability at node-local point(s) ``x``."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    batch = _batch_from_params(pts.reshape(-1, 3), params.mu, params.sigma, params.quat,
                               params.beta, P_MIN)
    prob = batch.prob[0]
    return float(prob[0]) if single else prob


def node_distortion(params: SurfelParams, sample: NodeSample, p_min: float = P_MIN) -> float:
    """Negative log-likelihood (nats) of the sample's occupancy under the surfel."""
    if len(sample.points) == 0:
        raise DegenerateError("node has no voxels")
    batch = _batch_from_params(sample.points, params.mu, params.sigma, params.quat,
                               params.beta, p_min)
    return float(batch.loss(sample.occupancy[None, :])[0])


def distortion_gradient(params: SurfelParams, sample: NodeSample, p_min: float = P_MIN) -> np.ndarray:
    """Analytic gradient of :func:`node_distortion` w.r.t. the unconstrained 11-vector."""
    if len(sample.points) == 0:
        raise DegenerateError("node has no voxels")
    batch = _batch_from_params(sample.points, params.mu, params.sigma, params.quat,
                               params.beta, p_min)
    return batch.gradient(sample.occupancy[None, :], params.quat[None, :], SIGMA_MIN)[0]


# --------------------------------------------------------------------------
# batched evaluation and fitting

def batch_distortion(level: int, occupancy: np.ndarray, mu, sigma, quat, beta,
                     p_min: float = P_MIN) -> np.ndarray:
    """Distortion of B surfels on their level-``level`` voxel grids.

    ``occupancy`` is ``(B, 8**level)`` in Morton order.
    """
    grid = local_voxel_grid(level).astype(np.float64)
    out = np.empty(len(occupancy))
    rows = chunk_rows(level)
    for lo in range(0, len(occupancy), rows):
        hi = lo + rows
        batch = _Batch(grid, mu[lo:hi], sigma[lo:hi], quat[lo:hi], beta[lo:hi], p_min)
        out[lo:hi] = batch.loss(occupancy[lo:hi])
    return out


def batch_probability(level: int, mu, sigma, quat, beta) -> np.ndarray:
    """``(B, 8**level)`` occupancy probabilities on the node grids."""
    grid = local_voxel_grid(level).astype(np.float64)
    return _Batch(grid, np.atleast_2d(mu), np.atleast_2d(sigma), np.atleast_2d(quat),
                  np.atleast_1d(beta), P_MIN).prob


FIT_CHUNK_ELEMENTS = 1 << 17


def chunk_rows(level: int) -> int:
    """Nodes per fitting chunk; fixed per level so results never depend on threading."""
    return max(1, FIT_CHUNK_ELEMENTS // 8 ** level)


@dataclass
class FitResult:
    """Fitted parameters of B surfels, one row per node."""

    mu: np.ndarray
    sigma: np.ndarray
    quat: np.ndarray
    beta: np.ndarray
    distortion: np.ndarray

    def __len__(self):
        return len(self.beta)

    def params(self, i: int) -> SurfelParams:
        return SurfelParams(self.mu[i], self.sigma[i], self.quat[i], float(self.beta[i]))


def initial_params(level: int, occupancy: np.ndarray):
    """PCA initialisation: centroid, covariance eigenframe, ``beta = 2``."""
    grid = local_voxel_grid(level).astype(np.float64)
    w = occupancy.astype(np.float64)
    count = np.maximum(w.sum(axis=1), 1.0)
    mu = np.stack([(w * grid[None, :, i]).sum(axis=1) / count for i in range(3)], -1)
    cov = np.empty((len(w), 3, 3))
    dev = [grid[None, :, i] - mu[:, i, None] for i in range(3)]
    for i in range(3):
        for j in range(i, 3):
            cov[:, i, j] = cov[:, j, i] = (w * dev[i] * dev[j]).sum(axis=1) / count
    evals, evecs = np.linalg.eigh(cov)
    flip = np.linalg.det(evecs) < 0
    evecs[flip, :, 2] *= -1.0
    quat = quaternion_from_rotation(evecs)
    sigma = np.clip(np.sqrt(np.maximum(evals, 0.0)), SIGMA_MIN,
                    SIGMA_MAX_FACTOR * 2.0 ** level)
    beta = np.full(len(w), 2.0)
    return mu, sigma, quat, beta


def _fit_chunk(level: int, occ: np.ndarray, config: FitConfig, jitter: np.ndarray) -> FitResult:
    grid = local_voxel_grid(level).astype(np.float64)
    mu, sigma, quat, beta = initial_params(level, occ)
    B = len(occ)
    side = 2.0 ** level
    s_max = math.log(SIGMA_MAX_FACTOR * side - SIGMA_MIN)
    theta = np.empty((B, 11))
    theta[:, 0:3] = mu
    theta[:, 3:6] = np.log(np.maximum(sigma - SIGMA_MIN, 1e-2))
    q = quat + jitter
    theta[:, 6:10] = q / np.linalg.norm(q, axis=1, keepdims=True)
    frac = (beta - BETA_MIN) / (BETA_MAX - BETA_MIN)
    theta[:, 10] = np.log(frac / (1.0 - frac))

    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    best_theta = theta.copy()
    best_loss = np.full(B, np.inf)
    b1, b2, lr = config.beta1, config.beta2, config.step_size
    for it in range(config.max_iters + 1):
        batch = _Batch(grid, theta[:, 0:3], _sigma_of(theta[:, 3:6]), theta[:, 6:10],
                       _beta_of(theta[:, 10]), config.p_min)
        loss = batch.loss(occ)
        better = loss < best_loss
        best_loss = np.where(better, loss, best_loss)
        best_theta[better] = theta[better]
        if it == config.max_iters:
            break
        g = batch.gradient(occ, theta[:, 6:10], SIGMA_MIN)
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        mhat = m1 / (1 - b1 ** (it + 1))
        vhat = m2 / (1 - b2 ** (it + 1))
        theta = theta - lr * mhat / (np.sqrt(vhat) + 1e-8)
        theta[:, 0:3] = np.clip(theta[:, 0:3], 0.0, side)
        theta[:, 3:6] = np.minimum(theta[:, 3:6], s_max)
        theta[:, 6:10] /= np.linalg.norm(theta[:, 6:10], axis=1, keepdims=True)
        theta[:, 10] = np.clip(theta[:, 10], -30.0, 30.0)

    mu = best_theta[:, 0:3]
    sigma = _sigma_of(best_theta[:, 3:6])
    quat = best_theta[:, 6:10] / np.linalg.norm(best_theta[:, 6:10], axis=1, keepdims=True)
    beta = _beta_of(best_theta[:, 10])
    dist = _Batch(grid, mu, sigma, quat, beta, config.p_min).loss(occ)
    return FitResult(mu, sigma, quat, beta, dist)


def _jitter(config: FitConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return 1e-3 * rng.standard_normal(4)


def fit_batch(level: int, occupancy: np.ndarray, config: FitConfig = FitConfig(),
              executor=None) -> FitResult:
    """Fit one surfel per row of ``occupancy`` (``(B, 8**level)`` booleans).

    Rows are processed in fixed-size chunks so the result does not depend on
    the executor's worker count.
    """
    occupancy = np.asarray(occupancy, dtype=bool)
    if level < 1:
        raise DegenerateError("surfels live on nodes of level >= 1")
    if occupancy.ndim != 2 or occupancy.shape[1] != 8 ** level:
        raise ValueError(f"occupancy must have shape (B, {8 ** level})")
    jitter = _jitter(config)
    rows = chunk_rows(level)
    chunks = [occupancy[lo:lo + rows] for lo in range(0, len(occupancy), rows)]
    if executor is None:
        parts = [_fit_chunk(level, c, config, jitter) for c in chunks]
    else:
        parts = list(executor.map(lambda c: _fit_chunk(level, c, config, jitter), chunks))
    if not parts:
        empty = np.zeros((0, 3))
        return FitResult(empty, empty.copy(), np.zeros((0, 4)), np.zeros(0), np.zeros(0))
    return FitResult(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("mu", "sigma", "quat", "beta", "distortion")))


def fit_surfel(sample: NodeSample, level: int, config: FitConfig = FitConfig()):
    """Fit one surfel to a node sampled on its full voxel grid.

    Returns ``(params, distortion)`` where the distortion equals
    :func:`node_distortion` at the returned parameters.
    """
    if not sample.occupancy.any():
        raise DegenerateError("node has no occupied voxel")
    if len(sample.points) != 8 ** level:
        raise ValueError("fit_surfel expects the node's full voxel grid")
    res = fit_batch(level, sample.occupancy[None, :], config)
    params = res.params(0)
    return params, node_distortion(params, sample, config.p_min)
