import numpy as np
import pytest

from psurfel.errors import CoordinateRangeError, PlyParseError
from psurfel.geometry import PointCloud
from psurfel.plyio import load_ply, save_ply


def write_ascii(path, rows, count=None, extra_header=""):
    count = len(rows) if count is None else count
    lines = ["ply", "format ascii 1.0", extra_header, f"element vertex {count}",
             "property float x", "property float y", "property float z", "end_header"]
    lines = [l for l in lines if l]
    lines += [" ".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def test_ascii_three_vertices(tmp_path):
    p = tmp_path / "a.ply"
    write_ascii(p, [(0, 0, 0), (1, 2, 3), (7, 7, 7)])
    cloud = load_ply(p)
    assert len(cloud) == 3
    assert cloud.depth == 3


def test_binary_matches_ascii(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(6, rng.integers(0, 64, size=(200, 3)))
    save_ply(cloud, tmp_path / "a.ply")
    save_ply(cloud, tmp_path / "b.ply", binary=True)
    a, b = load_ply(tmp_path / "a.ply"), load_ply(tmp_path / "b.ply")
    assert a.point_set() == b.point_set() == cloud.point_set()
    assert a.depth == b.depth == 6


def test_count_mismatch_is_parse_error(tmp_path):
    p = tmp_path / "bad.ply"
    write_ascii(p, [(0, 0, 0), (1, 1, 1)], count=5)
    with pytest.raises(PlyParseError):
        load_ply(p)


def test_garbage_header(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("not a ply file\n")
    with pytest.raises(PlyParseError):
        load_ply(p)


def test_non_integer_rejected_unless_quantized(tmp_path):
    p = tmp_path / "f.ply"
    write_ascii(p, [(0.4, 0, 0), (1, 1, 1)])
    with pytest.raises(CoordinateRangeError):
        load_ply(p)
    cloud = load_ply(p, quantize=True)
    assert cloud.point_set() == {(0, 0, 0), (1, 1, 1)}


def test_tolerance_and_depth(tmp_path):
    p = tmp_path / "t.ply"
    write_ascii(p, [(3.0000001, 2, 1)])
    assert load_ply(p).point_set() == {(3, 2, 1)}
    with pytest.raises(CoordinateRangeError):
        load_ply(p, depth=1)
    write_ascii(p, [(1, 1, 1)], extra_header="comment depth 9")
    assert load_ply(p).depth == 9
