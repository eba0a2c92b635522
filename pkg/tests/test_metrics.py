import math

import numpy as np
import pytest

from psurfel.errors import EmptyInputError, NonOverlapError
from psurfel.geometry import PointCloud
from psurfel.metrics import (PSNR_CAP, RdCurve, RdPoint, bd_rate, d1_psnr, d2_psnr, estimate_normals,
                             nearest, psnr)
from oracles import brute_d1, brute_d2, brute_nearest, random_cloud_pair


def test_d1_d2_match_brute_force_exactly():
    rng = np.random.default_rng(0)
    for trial in range(20):
        depth = int(rng.integers(3, 8))
        a, b = random_cloud_pair(rng, depth)
        peak = (1 << depth) - 1
        assert d1_psnr(a, b) == psnr(brute_d1(a.points.astype(float), b.points.astype(float)), peak)
        normals = estimate_normals(a, 9)
        expect = psnr(brute_d2(a.points.astype(float), b.points.astype(float), normals), peak)
        assert d2_psnr(a, b, normals) == expect


def test_nearest_breaks_ties_to_lowest_index():
    rng = np.random.default_rng(1)
    tgt = rng.integers(0, 4, size=(60, 3)).astype(float)
    src = rng.integers(0, 4, size=(200, 3)).astype(float) + 0.5
    assert np.array_equal(nearest(src, tgt), brute_nearest(src, tgt))


def test_two_point_depth10_case():
    a = PointCloud(10, np.array([[100, 100, 100]]))
    b = PointCloud(10, np.array([[101, 100, 100]]))
    assert d1_psnr(a, b) == pytest.approx(64.97, abs=0.01)
    assert d1_psnr(a, b) == pytest.approx(10 * math.log10(3 * 1023 ** 2), abs=1e-12)


def test_identical_clouds_hit_cap():
    a = PointCloud(6, np.random.default_rng(2).integers(0, 64, size=(50, 3)))
    assert d1_psnr(a, a) == PSNR_CAP
    assert d2_psnr(a, a) == PSNR_CAP


def test_empty_cloud_rejected():
    a = PointCloud(6, np.zeros((1, 3), dtype=int))
    with pytest.raises(EmptyInputError):
        d1_psnr(a, np.zeros((0, 3)), peak=63)


def grid_plane(axis, c=5, n=8):
    u, v = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cols = [u.ravel(), v.ravel()]
    cols.insert(axis, np.full(n * n, c))
    return np.stack(cols, axis=1).astype(float)


def test_normals_axis_planes():
    for axis, expect in ((2, (0, 0, 1)), (0, (1, 0, 0)), (1, (0, 1, 0))):
        pts = grid_plane(axis)
        normals = estimate_normals(pts, 9)
        assert np.allclose(normals, expect, atol=1e-9)


def test_normals_rotated_plane():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    pts2d = rng.random((400, 2)) * 40
    pts = np.column_stack([pts2d, np.zeros(400)]) @ q.T
    normals = estimate_normals(pts, 12)
    true = q[:, 2]
    centre = np.linalg.norm(pts2d - 20, axis=1) < 15
    cosang = np.abs(normals[centre] @ true)
    assert np.all(cosang >= math.cos(math.radians(5)))


def test_normals_degenerate_neighbourhood_falls_back():
    pts = np.zeros((5, 3))
    assert np.allclose(estimate_normals(pts, 3), (0, 0, 1))
    with pytest.raises(ValueError):
        estimate_normals(pts, 2)


def curve(rates, q):
    return RdCurve([RdPoint(r, d, d + 3) for r, d in zip(rates, q)])


def test_bd_rate_properties():
    q = [30.0, 34.0, 37.0, 41.0, 44.0]
    r = [0.1, 0.2, 0.4, 0.8, 1.6]
    assert bd_rate(curve(r, q), curve(r, q)) == pytest.approx(0.0, abs=1e-9)
    assert bd_rate(curve(r, q), curve([x * 0.9 for x in r], q)) == pytest.approx(-10.0, abs=1e-6)
    assert bd_rate(curve(r, q), curve([x * 0.9 for x in r], q), "d2") == pytest.approx(-10.0, abs=1e-6)
    with pytest.raises(NonOverlapError):
        bd_rate(curve(r, q), curve(r, [x + 50 for x in q]))
    with pytest.raises(ValueError):
        bd_rate(curve(r[:3], q[:3]), curve(r, q))


def test_rd_curve_sorted_and_csv(tmp_path):
    c = RdCurve([RdPoint(0.5, 40, 45), RdPoint(0.1, 30, 35)])
    assert c.rates().tolist() == [0.1, 0.5]
    path = tmp_path / "c.csv"
    c.write_csv(path)
    assert path.read_text().splitlines()[1] == "0.100000,30.000000,35.000000"
