import numpy as np
import pytest

from psurfel.codec import (HEADER_SIZE, CodecConfig, Candidates, Header, binarize, binarize_count, decode,
                           decode_header, decode_tree, encode, lossless_octree_bytes, reconstruct_candidates,
                           select_top, voxelize_leaf)
from psurfel.entropy import ParamQuantizer
from psurfel.errors import (CorruptStreamError, EmptyInputError, EmptySelectionError, PsurfelError,
                            TruncatedStreamError)
from psurfel.geometry import PointCloud, morton_encode
from psurfel.metrics import d1_psnr
from psurfel.rdtree import prepare_candidates
from psurfel.surfel import FitConfig, SurfelParams
from psurfel.synth import generate

FAST = FitConfig(max_iters=30)


def cfg(**kw):
    kw.setdefault("fit", FAST)
    kw.setdefault("workers", 1)
    return CodecConfig(**kw)


@pytest.fixture(scope="module")
def plane6():
    return generate("plane", 6, seed=0)


@pytest.fixture(scope="module")
def blob():
    rng = np.random.default_rng(0)
    return PointCloud(6, rng.integers(8, 40, size=(300, 3)))


@pytest.mark.parametrize("lam", [0.0, 0.1, 1.0, 10.0, 100.0])
def test_roundtrip_reproduces_decided_tree(blob, lam):
    res = encode(blob, cfg(lam=lam))
    header, tree = decode_tree(res.data)
    assert header == res.header
    assert tree == res.tree
    rec = decode(res.data)
    assert np.array_equal(rec.points, res.reconstruction.points)


def test_encode_is_thread_count_invariant(blob):
    a = encode(blob, cfg(lam=1.0, workers=1)).data
    b = encode(blob, cfg(lam=1.0, workers=4)).data
    c = encode(blob, cfg(lam=1.0, workers=1)).data
    assert a == b == c


def test_reported_d1_is_measured_on_decoded_cloud(plane6):
    res = encode(plane6, cfg(lam=1.0))
    assert res.stats["d1_db"] == d1_psnr(plane6, decode(res.data))


def test_plane_reconstructs_close_to_source(plane6):
    res = encode(plane6, cfg(lam=1.0))
    rec = decode(res.data)
    assert len(rec) == len(plane6)
    assert d1_psnr(plane6, rec) > 50.0
    # every decoded point stays within one voxel of the plane's z range
    z = plane6.points[:, 2]
    assert rec.points[:, 2].min() >= z.min() - 1 and rec.points[:, 2].max() <= z.max() + 1


def test_stats_bit_categories(blob):
    res = encode(blob, cfg(lam=1.0))
    s = res.stats
    body_bits = (len(res.data) - HEADER_SIZE) * 8
    est = s["octree_bits"] + s["surfel_bits"] + s["flag_bits"]
    assert abs(body_bits - est) <= 40  # range-coder termination overhead
    assert s["bpp"] == res.bpp


def test_precomputed_candidates_give_same_stream(blob):
    cands = prepare_candidates(blob, 3, 1, FAST, workers=1)
    assert encode(blob, cfg(lam=0.8), cands).data == encode(blob, cfg(lam=0.8)).data
    with pytest.raises(ValueError):
        encode(blob, cfg(lam=0.8, top=2), cands)


@pytest.mark.parametrize("rho", [0.5, 1.0, 2.0])
def test_binarize_cardinality(blob, rho):
    res = encode(blob, cfg(lam=1.0, rho=rho))
    rec = decode(res.data)
    n_cand = len(reconstruct_candidates(res.tree, res.header.quantizer))
    assert len(rec) == min(int(np.floor(rho * len(blob))), n_cand)


def test_select_top_matches_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 300))
        prob = rng.choice([0.1, 0.5, 0.9, 1.0], size=n)
        codes = rng.permutation(10 * n)[:n].astype(np.uint64)
        k = int(rng.integers(1, n + 1))
        oracle = sorted(range(n), key=lambda i: (-prob[i], int(codes[i])))[:k]
        assert select_top(prob, codes, k).tolist() == oracle


def test_binarize_examples():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    codes = np.array([morton_encode(*p, 2) for p in pts], dtype=np.uint64)
    cand = Candidates(pts, np.array([0.5, 0.9, 0.5, 0.5]), codes)
    out = binarize(cand, 4, 0.5, 2)
    assert sorted(map(tuple, out.points)) == [(0, 0, 0), (1, 0, 0)]
    assert len(binarize(cand, 4, 2.0, 2)) == 4
    with pytest.raises(EmptySelectionError):
        binarize(cand, 1, 0.5, 2)
    with pytest.raises(EmptySelectionError):
        binarize_count(Candidates(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.uint64)), 3, 2)


def test_voxelize_leaf():
    out = voxelize_leaf(0, morton_encode(3, 1, 2, 4), None, depth=4)
    assert out.points.tolist() == [[3, 1, 2]] and out.prob.tolist() == [1.0]
    params = SurfelParams(np.array([1.0, 1.0, 1.0]), np.array([0.5, 0.5, 0.5]),
                          np.array([1.0, 0.0, 0.0, 0.0]), 2.0)
    out = voxelize_leaf(1, morton_encode(1, 0, 0, 3), params, depth=4)
    assert len(out) == 8
    assert sorted(map(tuple, out.points)) == [(x, y, z) for x in (2, 3) for y in (0, 1) for z in (0, 1)]
    assert np.all((out.prob > 0) & (out.prob <= 1))
    # the corner at mu is fully occupied
    i = out.points.tolist().index([3, 1, 1])
    assert out.prob[i] == 1.0


def test_header_roundtrip_and_validation():
    h = Header(9, 3, 1, 12345, 1024, ParamQuantizer(), 10)
    assert Header.unpack(h.pack()) == h
    assert len(h.pack()) == HEADER_SIZE
    assert Header(9, 3, 1, 10, 512, ParamQuantizer(), 0).target_count == 5
    with pytest.raises(ValueError):
        CodecConfig(rho=0.0)
    with pytest.raises(ValueError):
        CodecConfig(floor=4, top=3)
    with pytest.raises(ValueError):
        CodecConfig(lam=-1.0)


def test_corrupt_streams_are_rejected(blob):
    data = encode(blob, cfg(lam=1.0)).data
    with pytest.raises(CorruptStreamError):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CorruptStreamError):
        decode(data[:4] + bytes([99]) + data[5:])
    with pytest.raises(TruncatedStreamError):
        decode_header(data[:HEADER_SIZE - 1])
    for cut in (HEADER_SIZE, HEADER_SIZE + 3, len(data) - 1):
        with pytest.raises(TruncatedStreamError):
            decode(data[:cut])


def test_bit_flips_raise_codec_errors_or_decode(blob):
    data = bytearray(encode(blob, cfg(lam=1.0)).data)
    rng = np.random.default_rng(5)
    for _ in range(30):
        bad = bytearray(data)
        pos = int(rng.integers(HEADER_SIZE, len(bad)))
        bad[pos] ^= 1 << int(rng.integers(8))
        try:
            decode(bytes(bad))
        except PsurfelError:
            pass


def test_empty_cloud_rejected():
    with pytest.raises(EmptyInputError):
        prepare_candidates(PointCloud(5, np.zeros((0, 3), dtype=int)), 3, 1, FAST)


def test_too_shallow_cloud_rejected():
    with pytest.raises(ValueError):
        encode(PointCloud(3, np.zeros((1, 3), dtype=int)), cfg())


def test_lossless_reference_is_deterministic(plane6):
    a = lossless_octree_bytes(plane6)
    assert a == lossless_octree_bytes(plane6)
    assert len(a) > HEADER_SIZE
