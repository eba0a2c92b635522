"""Binary range coding, adaptive bit models and the codec's symbol coders.

The range coder is the classic carry-propagating 32-bit design (low is kept
in 33 bits, range renormalised byte-wise whenever it drops below 2**24).
Probabilities are 16-bit estimates of P(bit = 1) adapted with a shift of 5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CorruptStreamError, DegenerateError, TruncatedStreamError
from .surfel import BETA_MAX, BETA_MIN, SIGMA_MAX_FACTOR, SIGMA_MIN, SurfelParams

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
PROB_FLOOR = 32
PROB_CEIL = PROB_ONE - PROB_FLOOR
ADAPT_SHIFT = 5
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class AdaptiveBitModel:
    __slots__ = ("p",)

    def __init__(self, p: int = PROB_ONE // 2):
        self.p = p

    def __repr__(self):
        return f"AdaptiveBitModel(p={self.p})"

    @property
    def prob_one(self) -> float:
        return self.p / PROB_ONE

    def update(self, bit: int) -> None:
        p = self.p + (((bit << PROB_BITS) - self.p) >> ADAPT_SHIFT)
        self.p = PROB_FLOOR if p < PROB_FLOOR else PROB_CEIL if p > PROB_CEIL else p


def estimate_bits(model: AdaptiveBitModel, bit: int) -> float:
    """Ideal code length of ``bit`` under ``model`` in bits; the model is not touched."""
    p = model.p if bit else PROB_ONE - model.p
    return PROB_BITS - math.log2(p)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._skip_first = True
        self._finished = False

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self._cache
            while True:
                if self._skip_first:
                    # the very first byte is always zero; it is implied on decode
                    self._skip_first = False
                else:
                    self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, model: AdaptiveBitModel, bit: int) -> None:
        bound = (self.range >> PROB_BITS) * model.p
        if bit:
            self.range = bound
        else:
            self.low += bound
            self.range -= bound
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()
        model.update(bit)

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(5):
                self._shift_low()
            self._finished = True
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes, pos: int = 0):
        self._data = data
        self._pos = pos
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise TruncatedStreamError("read past the end of the coded body")
        b = self._data[self._pos]
        self._pos += 1
        return b

    @property
    def position(self) -> int:
        return self._pos

    def decode(self, model: AdaptiveBitModel) -> int:
        bound = (self.range >> PROB_BITS) * model.p
        if self.code < bound:
            self.range = bound
            bit = 1
        else:
            self.code -= bound
            self.range -= bound
            bit = 0
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
        model.update(bit)
        return bit


def encode_bit(coder: RangeEncoder, model: AdaptiveBitModel, bit: int) -> None:
    coder.encode(model, bit)


def decode_bit(coder: RangeDecoder, model: AdaptiveBitModel) -> int:
    return coder.decode(model)


class BitCounter:
    """Stand-in encoder that only accumulates ideal code lengths (used for rate estimates)."""

    def __init__(self):
        self.bits = 0.0

    def encode(self, model: AdaptiveBitModel, bit: int) -> None:
        self.bits += estimate_bits(model, bit)
        model.update(bit)


# --------------------------------------------------------------------------
# octant occupancy

def popcount_bucket(popcount) -> np.ndarray | int:
    """Parent-popcount bucket: 1 -> 0, 2..3 -> 1, 4..8 -> 2 (0 is treated as 1)."""
    if np.isscalar(popcount):
        return 0 if popcount <= 1 else 1 if popcount <= 3 else 2
    pc = np.asarray(popcount)
    return np.where(pc <= 1, 0, np.where(pc <= 3, 1, 2))


_OCTANT_CTX_PER_LEVEL = 3 * 255


def octant_contexts(level: int, bucket, mask) -> tuple[np.ndarray, np.ndarray]:
    """Context ids and bits ``(B, 8)`` for coding each mask in groups j = 0..7.

    The context of group j is (level, parent bucket, octants already coded in
    this node), i.e. only symbols the decoder has seen.
    """
    mask = np.asarray(mask, dtype=np.int64).reshape(-1)
    bucket = np.broadcast_to(np.asarray(bucket, dtype=np.int64), mask.shape)
    j = np.arange(8)
    bits = (mask[:, None] >> j) & 1
    prefix = mask[:, None] & ((1 << j) - 1)
    node = (1 << j) - 1 + prefix
    ctx = level * _OCTANT_CTX_PER_LEVEL + bucket[:, None] * 255 + node
    return ctx, bits


class OctantModels:
    """Adaptive models for octant masks; ``contextual=False`` shares one model for every bit."""

    def __init__(self, depth: int, contextual: bool = True):
        self.contextual = contextual
        n = (depth + 1) * _OCTANT_CTX_PER_LEVEL if contextual else 1
        self.models = [AdaptiveBitModel() for _ in range(n)]

    def model(self, level: int, bucket: int, j: int, prefix: int) -> AdaptiveBitModel:
        if not self.contextual:
            return self.models[0]
        return self.models[level * _OCTANT_CTX_PER_LEVEL + bucket * 255 + (1 << j) - 1 + prefix]


def encode_octants(coder, models: OctantModels, level: int, bucket: int, mask: int) -> None:
    if mask == 0:
        raise CorruptStreamError("a split node must have at least one occupied octant")
    base = level * _OCTANT_CTX_PER_LEVEL + bucket * 255 - 1
    flat = models.models
    for j in range(8):
        bit = (mask >> j) & 1
        m = flat[base + (1 << j) + (mask & ((1 << j) - 1))] if models.contextual else flat[0]
        coder.encode(m, bit)


def decode_octants(coder: RangeDecoder, models: OctantModels, level: int, bucket: int) -> int:
    base = level * _OCTANT_CTX_PER_LEVEL + bucket * 255 - 1
    flat = models.models
    mask = 0
    for j in range(8):
        m = flat[base + (1 << j) + mask] if models.contextual else flat[0]
        mask |= coder.decode(m) << j
    if mask == 0:
        raise CorruptStreamError("decoded an empty octant mask for a split node")
    return mask


# --------------------------------------------------------------------------
# surfel parameters

FIELD_NAMES = ("mu_x", "mu_y", "mu_z", "ls_0", "ls_1", "ls_2", "q_w", "q_x", "q_y", "q_z", "beta")


@dataclass(frozen=True)
class ParamQuantizer:
    """Uniform quantiser for the 11 surfel parameters of a level-``l`` node.

    * mu: ``mu_bits`` per axis over ``[0, 2**l]`` (cell midpoints)
    * sigma: ``log_sigma_bits`` per axis, uniform in log over
      ``[log sigma_min, log(4 * 2**l)]`` (cell midpoints)
    * quaternion: scaled so its largest-magnitude component is +1, then each
      component on the symmetric grid ``k / (2**(quat_bits-1) - 1)``;
      renormalised after dequantisation
    * beta: ``beta_bits``, uniform in log over ``[beta_min, beta_max]``

    Serialised as four u8 widths and three f64 range values.
    """

    mu_bits: int = 7
    log_sigma_bits: int = 6
    quat_bits: int = 8
    beta_bits: int = 5
    sigma_min: float = SIGMA_MIN
    beta_min: float = BETA_MIN
    beta_max: float = BETA_MAX

    @property
    def field_bits(self) -> tuple[int, ...]:
        return (self.mu_bits,) * 3 + (self.log_sigma_bits,) * 3 + (self.quat_bits,) * 4 + (self.beta_bits,)

    @property
    def raw_bits(self) -> int:
        return sum(self.field_bits)

    def _log_sigma_range(self, level):
        return math.log(self.sigma_min), math.log(SIGMA_MAX_FACTOR * 2.0 ** level)

    def widest_sigma(self, level: int) -> float:
        """Centre of the top sigma cell: the widest representable extent."""
        lo, hi = self._log_sigma_range(level)
        return math.exp(hi - 0.5 * (hi - lo) / (1 << self.log_sigma_bits))

    def steps(self, level: int) -> dict[str, float]:
        lo, hi = self._log_sigma_range(level)
        return {
            "mu": 2.0 ** level / (1 << self.mu_bits),
            "log_sigma": (hi - lo) / (1 << self.log_sigma_bits),
            "quat": 1.0 / ((1 << (self.quat_bits - 1)) - 1),
            "log_beta": (math.log(self.beta_max) - math.log(self.beta_min)) / (1 << self.beta_bits),
        }

    def quantize_arrays(self, level: int, mu, sigma, quat, beta) -> tuple[np.ndarray, np.ndarray]:
        """Quantise B surfels; returns ``(indices (B, 11), clamped (B,))``."""
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        quat = np.atleast_2d(np.asarray(quat, dtype=np.float64))
        beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
        st = self.steps(level)
        out = np.empty((len(mu), 11), dtype=np.int64)
        clamped = np.zeros(len(mu), dtype=bool)

        def uniform(values, lo, step, bits):
            raw = np.floor((values - lo) / step)
            idx = np.clip(raw, 0, (1 << bits) - 1)
            return idx.astype(np.int64), (raw != idx)

        out[:, 0:3], c = uniform(mu, 0.0, st["mu"], self.mu_bits)
        clamped |= c.any(axis=1)
        lo, _ = self._log_sigma_range(level)
        out[:, 3:6], c = uniform(np.log(sigma), lo, st["log_sigma"], self.log_sigma_bits)
        clamped |= c.any(axis=1)
        out[:, 10], c = uniform(np.log(beta), math.log(self.beta_min), st["log_beta"], self.beta_bits)
        clamped |= c

        absq = np.abs(quat)
        if np.any(absq.max(axis=1) == 0):
            raise DegenerateError("zero quaternion cannot be quantised")
        lead = np.argmax(absq, axis=1)
        lead_val = np.take_along_axis(quat, lead[:, None], axis=1)
        scaled = quat / lead_val  # leading component becomes exactly +1
        half = (1 << (self.quat_bits - 1)) - 1
        out[:, 6:10] = np.clip(np.rint(scaled * half), -half, half).astype(np.int64) + half
        return out, clamped

    def dequantize_arrays(self, level: int, idx) -> tuple[np.ndarray, ...]:
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        for k, bits in enumerate(self.field_bits):
            if np.any((idx[:, k] < 0) | (idx[:, k] >= (1 << bits))):
                raise CorruptStreamError(f"parameter field {FIELD_NAMES[k]} out of range")
        st = self.steps(level)
        mu = (idx[:, 0:3] + 0.5) * st["mu"]
        lo, _ = self._log_sigma_range(level)
        sigma = np.exp(lo + (idx[:, 3:6] + 0.5) * st["log_sigma"])
        beta = np.exp(math.log(self.beta_min) + (idx[:, 10] + 0.5) * st["log_beta"])
        half = (1 << (self.quat_bits - 1)) - 1
        q = (idx[:, 6:10] - half) / half
        norm = np.sqrt(np.sum(q * q, axis=1))
        if np.any(norm == 0):
            raise CorruptStreamError("decoded a zero quaternion")
        return mu, sigma, q / norm[:, None], beta

    def quantize(self, params: SurfelParams, level: int) -> tuple[int, ...]:
        idx, _ = self.quantize_arrays(level, params.mu, params.sigma, params.quat, params.beta)
        return tuple(int(v) for v in idx[0])

    def dequantize(self, indices, level: int) -> SurfelParams:
        mu, sigma, quat, beta = self.dequantize_arrays(level, indices)
        return SurfelParams(mu[0], sigma[0], quat[0], float(beta[0]))

    def to_bytes(self) -> bytes:
        import struct
        return struct.pack("<4B3d", self.mu_bits, self.log_sigma_bits, self.quat_bits,
                           self.beta_bits, self.sigma_min, self.beta_min, self.beta_max)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamQuantizer":
        import struct
        mb, sb, qb, bb, smin, bmin, bmax = struct.unpack("<4B3d", data)
        if not (1 <= mb <= 16 and 1 <= sb <= 16 and 2 <= qb <= 16 and 1 <= bb <= 16):
            raise CorruptStreamError("invalid quantiser bit widths")
        if not (smin > 0 and 0 < bmin < bmax):
            raise CorruptStreamError("invalid quantiser ranges")
        return cls(mb, sb, qb, bb, smin, bmin, bmax)

    SERIALIZED_SIZE = 28


def param_contexts(quantizer: ParamQuantizer, idx) -> tuple[np.ndarray, np.ndarray]:
    """Per-bit context ids and bits for quantised tuples ``(B, 11)``.

    Each field is coded MSB first through a binary tree of models, so a bit's
    context is the field plus the already-coded higher bits of that field.
    """
    idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
    ctx_cols, bit_cols = [], []
    offset = 0
    for k, bits in enumerate(quantizer.field_bits):
        v = idx[:, k]
        for pos in range(bits):
            shift = bits - 1 - pos
            prefix = v >> (shift + 1)
            ctx_cols.append(offset + (1 << pos) - 1 + prefix)
            bit_cols.append((v >> shift) & 1)
        offset += (1 << bits) - 1
    return np.stack(ctx_cols, 1), np.stack(bit_cols, 1)


class ParamModels:
    """Binary-tree adaptive models per (level, field)."""

    def __init__(self, quantizer: ParamQuantizer, levels):
        self.quantizer = quantizer
        self.per_level = sum((1 << b) - 1 for b in quantizer.field_bits)
        self.models = {l: [AdaptiveBitModel() for _ in range(self.per_level)] for l in levels}


def encode_params(coder, models: ParamModels, level: int, indices) -> None:
    flat = models.models[level]
    offset = 0
    for v, bits in zip(indices, models.quantizer.field_bits):
        v = int(v)
        node = 1
        for shift in range(bits - 1, -1, -1):
            bit = (v >> shift) & 1
            coder.encode(flat[offset + node - 1], bit)
            node = (node << 1) | bit
        offset += (1 << bits) - 1


def decode_params(coder: RangeDecoder, models: ParamModels, level: int) -> tuple[int, ...]:
    flat = models.models[level]
    offset = 0
    out = []
    for bits in models.quantizer.field_bits:
        node = 1
        for _ in range(bits):
            node = (node << 1) | coder.decode(flat[offset + node - 1])
        out.append(node - (1 << bits))
        offset += (1 << bits) - 1
    return tuple(out)


# --------------------------------------------------------------------------
# static rate tables

class StaticRateTable:
    """Order-independent per-context probabilities estimated from symbol counts.

    Probabilities are clipped to the adaptive models' range so estimates stay
    comparable with realised code lengths.
    """

    def __init__(self, n_contexts: int, ctx=None, bits=None):
        ones = np.zeros(n_contexts)
        total = np.zeros(n_contexts)
        if ctx is not None and np.size(ctx):
            ctx = np.asarray(ctx).ravel()
            bits = np.asarray(bits).ravel()
            total += np.bincount(ctx, minlength=n_contexts)
            ones += np.bincount(ctx, weights=bits, minlength=n_contexts)
        p1 = (ones + 0.5) / (total + 1.0)
        p1 = np.clip(p1, PROB_FLOOR / PROB_ONE, PROB_CEIL / PROB_ONE)
        self.cost_one = -np.log2(p1)
        self.cost_zero = -np.log2(1.0 - p1)

    def bits(self, ctx, bits) -> np.ndarray:
        """Summed cost along the last axis of ``(…, k)`` context/bit arrays."""
        ctx = np.asarray(ctx)
        return np.where(np.asarray(bits) == 1, self.cost_one[ctx], self.cost_zero[ctx]).sum(axis=-1)
