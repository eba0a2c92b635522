import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psurfel.entropy import (PROB_CEIL, PROB_FLOOR, AdaptiveBitModel, OctantModels, ParamModels,
                             ParamQuantizer, RangeDecoder, RangeEncoder, StaticRateTable,
                             decode_bit, decode_octants, decode_params, encode_bit, encode_octants,
                             encode_params, estimate_bits, octant_contexts, param_contexts)
from psurfel.errors import CorruptStreamError, TruncatedStreamError
from psurfel.geometry import build_octree
from psurfel.rdtree import popcount
from psurfel.surfel import SurfelParams, rotation_from_quaternion
from psurfel.synth import generate


def entropy(p):
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


def code_bits(bits, n_models=1, ctx=None):
    enc = RangeEncoder()
    models = [AdaptiveBitModel() for _ in range(n_models)]
    est = 0.0
    for i, b in enumerate(bits):
        m = models[0 if ctx is None else ctx[i]]
        est += estimate_bits(m, int(b))
        encode_bit(enc, m, int(b))
    return enc.finish(), est


def test_model_adaptation_rule():
    m = AdaptiveBitModel()
    m.update(1)
    assert m.p == 32768 + (65536 - 32768) // 32
    m = AdaptiveBitModel()
    m.update(0)
    assert m.p == 32768 - 32768 // 32
    m = AdaptiveBitModel()
    for _ in range(2000):
        m.update(0)
    assert m.p == PROB_FLOOR
    for _ in range(2000):
        m.update(1)
    assert m.p == PROB_CEIL


def test_estimate_bits_examples():
    m = AdaptiveBitModel()
    assert estimate_bits(m, 0) == estimate_bits(m, 1) == 1.0
    q = AdaptiveBitModel(65536 // 4)
    assert estimate_bits(q, 1) == 2.0
    assert q.p == 65536 // 4


def test_roundtrip_random_bits_with_contexts():
    rng = np.random.default_rng(0)
    bits = (rng.random(10_000) < rng.random(10_000)).astype(int)
    ctx = rng.integers(0, 5, 10_000)
    data, _ = code_bits(bits, 5, ctx)
    dec = RangeDecoder(data)
    models = [AdaptiveBitModel() for _ in range(5)]
    out = [decode_bit(dec, models[c]) for c in ctx]
    assert out == bits.tolist()
    assert dec.position == len(data)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.booleans()), min_size=0, max_size=400))
def test_lockstep_models(seq):
    enc, dec_models, enc_models = RangeEncoder(), [AdaptiveBitModel() for _ in range(4)], [AdaptiveBitModel() for _ in range(4)]
    for c, b in seq:
        encode_bit(enc, enc_models[c], int(b))
    data = enc.finish()
    dec = RangeDecoder(data)
    for c, b in seq:
        assert decode_bit(dec, dec_models[c]) == int(b)
    assert [m.p for m in enc_models] == [m.p for m in dec_models]


def test_all_zero_bits_compress():
    data, _ = code_bits([0] * 1000)
    assert len(data) * 8 < 120


def test_iid_bits_near_entropy():
    rng = np.random.default_rng(1)
    bits = (rng.random(100_000) < 0.2).astype(int)
    data, est = code_bits(bits)
    # the empirical entropy of this draw; adaptation with shift 5 costs ~1.6%
    f = bits.mean()
    assert len(data) * 8 < 100_000 * entropy(f) * 1.025
    assert abs(len(data) * 8 - est) / est < 0.005


def test_truncated_stream():
    data, _ = code_bits([1, 0, 1, 1, 0] * 400)
    dec = RangeDecoder(data[: len(data) // 2])
    m = AdaptiveBitModel()
    with pytest.raises(TruncatedStreamError):
        for _ in range(2000):
            decode_bit(dec, m)
    with pytest.raises(TruncatedStreamError):
        RangeDecoder(b"\x01\x02")


# -- octants -------------------------------------------------------------------

def roundtrip_masks(masks, levels, buckets, contextual=True):
    enc = RangeEncoder()
    models = OctantModels(8, contextual)
    for m, l, b in zip(masks, levels, buckets):
        encode_octants(enc, models, l, b, m)
    data = enc.finish()
    dec = RangeDecoder(data)
    models = OctantModels(8, contextual)
    out = [decode_octants(dec, models, l, b) for l, b in zip(levels, buckets)]
    return data, out


def test_octant_roundtrip():
    data, out = roundtrip_masks([1], [3], [0])
    assert out == [1]
    rng = np.random.default_rng(2)
    masks = rng.integers(1, 256, 500).tolist()
    levels = rng.integers(1, 8, 500).tolist()
    buckets = rng.integers(0, 3, 500).tolist()
    assert roundtrip_masks(masks, levels, buckets)[1] == masks


def test_octant_contexts_are_causal():
    """Bit j's context depends only on bits < j of the same mask."""
    rng = np.random.default_rng(3)
    masks = rng.integers(1, 256, 200)
    ctx, bits = octant_contexts(4, 1, masks)
    for m, c in zip(masks.tolist(), ctx):
        for j in range(8):
            flipped = m ^ (0xFF & ~((1 << j) - 1))  # change bits >= j
            c2, _ = octant_contexts(4, 1, [flipped])
            assert c2[0, j] == c[j]


def test_zero_mask_rejected():
    with pytest.raises(CorruptStreamError):
        encode_octants(RangeEncoder(), OctantModels(4), 2, 0, 0)
    # a stream of all-zero decisions decodes to an empty mask
    enc = RangeEncoder()
    m = AdaptiveBitModel()
    for _ in range(64):
        encode_bit(enc, m, 0)
    data = enc.finish()
    with pytest.raises(CorruptStreamError):
        decode_octants(RangeDecoder(data), OctantModels(4, contextual=False), 2, 0)


def test_context_beats_single_model_on_plane():
    cloud = generate("plane", 8, seed=0)
    tree = build_octree(cloud)
    masks, levels, buckets = [], [], []
    for level in range(tree.depth, 0, -1):
        if level == tree.depth:
            b = np.zeros(1, dtype=int)
        else:
            pc = popcount(tree.masks[level + 1][tree.parent_index(level)])
            b = np.where(pc <= 1, 0, np.where(pc <= 3, 1, 2))
        masks += tree.masks[level].tolist()
        levels += [level] * tree.n_nodes(level)
        buckets += b.tolist()
    assert len(masks) >= 10_000
    ctx_data, out = roundtrip_masks(masks, levels, buckets, True)
    flat_data, _ = roundtrip_masks(masks, levels, buckets, False)
    assert out == masks
    assert len(ctx_data) < len(flat_data)


def test_full_masks_cost_converges():
    enc = RangeEncoder()
    models = OctantModels(4)
    tally = []
    for _ in range(400):
        before = sum(estimate_bits(models.model(2, 2, j, (1 << j) - 1), 1) for j in range(8))
        tally.append(before)
        encode_octants(enc, models, 2, 2, 255)
    assert tally[-1] < 1.0


# -- parameters ----------------------------------------------------------------

Q = ParamQuantizer()


def test_quantizer_layout():
    assert Q.field_bits == (7, 7, 7, 6, 6, 6, 8, 8, 8, 8, 5)
    assert Q.raw_bits == 76
    assert ParamQuantizer.from_bytes(Q.to_bytes()) == Q


def random_params(rng, level):
    return SurfelParams(rng.random(3) * 2 ** level, 0.05 * np.exp(rng.random(3) * np.log(80 * 2 ** level)),
                        rng.standard_normal(4), 0.5 * np.exp(rng.random() * np.log(16)))


def test_mu_grid_exact():
    level = 2
    step = 2 ** level / 128
    p = SurfelParams(np.array([3, 60, 127]) * step + step / 2, [1, 1, 1], [1, 0, 0, 0], 2.0)
    back = Q.dequantize(Q.quantize(p, level), level)
    assert np.array_equal(back.mu, p.mu)


def test_quantize_error_bounds_and_idempotence():
    rng = np.random.default_rng(4)
    for _ in range(300):
        level = int(rng.integers(1, 4))
        p = random_params(rng, level)
        t = Q.quantize(p, level)
        back = Q.dequantize(t, level)
        st_ = Q.steps(level)
        assert np.all(np.abs(back.mu - p.mu) <= 2 ** level / 2 ** 8 + 1e-12)
        assert np.all(np.abs(np.log(back.sigma) - np.log(p.sigma)) <= st_["log_sigma"] / 2 + 1e-12)
        assert abs(math.log(back.beta) - math.log(p.beta)) <= st_["log_beta"] / 2 + 1e-12
        # quaternion: on the max-norm scaled grid, within half a step before renormalising
        q = p.quat / p.quat[np.argmax(np.abs(p.quat))]
        qb = back.quat / back.quat[np.argmax(np.abs(back.quat))]
        assert np.all(np.abs(qb - q) <= st_["quat"] / 2 + 1e-9)
        assert abs(np.linalg.norm(back.quat) - 1) < 1e-12
        assert Q.quantize(back, level) == t


def test_identity_quaternion():
    p = SurfelParams([1, 1, 1], [1, 1, 1], [1, 0, 0, 0], 2.0)
    back = Q.dequantize(Q.quantize(p, 2), 2)
    R = rotation_from_quaternion(back.quat)
    angle = math.acos(min(1.0, (np.trace(R) - 1) / 2))
    assert angle < 1e-2


def test_out_of_range_clamped_and_flagged():
    idx, clamped = Q.quantize_arrays(1, [[5.0, 0.5, 0.5]], [[1, 1, 1]], [[1, 0, 0, 0]], [2.0])
    assert idx[0, 0] == 127 and clamped[0]
    _, clamped = Q.quantize_arrays(1, [[0.5, 0.5, 0.5]], [[1, 1, 1]], [[1, 0, 0, 0]], [2.0])
    assert not clamped[0]


def code_tuples(tuples, level=2):
    enc = RangeEncoder()
    models = ParamModels(Q, [level])
    for t in tuples:
        encode_params(enc, models, level, t)
    data = enc.finish()
    dec = RangeDecoder(data)
    models = ParamModels(Q, [level])
    return data, [decode_params(dec, models, level) for _ in tuples]


def test_param_roundtrip():
    rng = np.random.default_rng(5)
    tuples = [Q.quantize(random_params(rng, 2), 2) for _ in range(200)]
    _, out = code_tuples(tuples)
    assert out == tuples


def test_correlated_params_compress():
    rng = np.random.default_rng(6)
    base = SurfelParams([2, 2, 2], [1.5, 1.4, 0.1], [0.98, 0.1, 0.05, 0.0], 2.0)
    tuples = []
    for _ in range(1000):
        p = SurfelParams(base.mu + rng.normal(0, 0.03, 3), base.sigma * np.exp(rng.normal(0, 0.03, 3)),
                         base.quat + rng.normal(0, 0.003, 4), base.beta)
        tuples.append(Q.quantize(p, 2))
    data, _ = code_tuples(tuples)
    assert len(data) * 8 / 1000 < 0.6 * Q.raw_bits


def test_alternating_extremes_bounded():
    lo = tuple([0] * 6 + [0, 0, 0, 0] + [0])
    hi = tuple([(1 << b) - 1 for b in Q.field_bits])
    tuples = [lo if i % 2 == 0 else hi for i in range(1000)]
    data, out = code_tuples(tuples)
    assert out == tuples
    assert len(data) * 8 <= 1000 * Q.raw_bits * 1.02


def test_param_contexts_match_models():
    """The vectorised context ids index the same tree nodes the coder walks."""
    rng = np.random.default_rng(7)
    idx = np.array([Q.quantize(random_params(rng, 1), 1) for _ in range(50)])
    ctx, bits = param_contexts(Q, idx)
    assert ctx.shape == bits.shape == (50, Q.raw_bits)
    per_level = sum((1 << b) - 1 for b in Q.field_bits)
    assert ctx.max() < per_level
    # rebuild each tuple from its bits
    pos = 0
    for k, b in enumerate(Q.field_bits):
        val = np.zeros(50, dtype=int)
        for j in range(b):
            val = (val << 1) | bits[:, pos + j]
        assert np.array_equal(val, idx[:, k])
        pos += b


def test_static_table():
    table = StaticRateTable(2, np.array([0, 0, 0, 1]), np.array([1, 1, 1, 0]))
    assert table.bits(np.array([[0]]), np.array([[1]]))[0] == pytest.approx(-math.log2(3.5 / 4))
    empty = StaticRateTable(3)
    assert empty.bits(np.array([[2, 1]]), np.array([[0, 1]]))[0] == pytest.approx(2.0)
