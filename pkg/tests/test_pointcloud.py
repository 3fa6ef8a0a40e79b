import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpscan.geometry import Pose
from bpscan.pointcloud import (
    CloudFormatError,
    GridIndex,
    SourceCloud,
    SurfaceCloud,
    estimate_normals,
    load_cloud,
    neighbors,
    save_cloud,
    smallest_eigenvector,
)


def brute_neighbors(pts, i, r):
    d = np.linalg.norm(pts - pts[i], axis=1)
    return np.flatnonzero(d <= r)


def test_neighbors_single_point():
    assert list(neighbors([[1.0, 2.0]], 0, 0.5)) == [0]


def test_neighbors_on_a_line():
    pts = [[0, 0], [1, 0], [5, 0]]
    assert list(neighbors(pts, 0, 2.0)) == [0, 1]


def test_neighbors_match_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-5, 5, size=(100, 2))
    index = GridIndex(pts, 1.3)
    for i in range(len(pts)):
        assert list(index.query(i)) == list(brute_neighbors(pts, i, 1.3))


def test_neighbors_out_of_range():
    with pytest.raises(IndexError):
        neighbors([[0, 0]], 3, 1.0)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.1, 3.0))
def test_neighbors_symmetric(seed, r):
    pts = np.random.default_rng(seed).uniform(-4, 4, size=(40, 2))
    index = GridIndex(pts, r)
    sets = [set(index.query(i)) for i in range(len(pts))]
    for i, s in enumerate(sets):
        for k in s:
            assert i in sets[k]


def test_closed_form_eigenvector_matches_numpy():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = rng.normal(size=(2, 2))
        cov = m @ m.T
        vec, lo, hi = smallest_eigenvector(cov)
        vals, vecs = np.linalg.eigh(cov)
        assert lo == pytest.approx(vals[0], abs=1e-12)
        assert hi == pytest.approx(vals[1], abs=1e-12)
        assert abs(abs(vec @ vecs[:, 0]) - 1.0) < 1e-10


def test_normals_collinear_points():
    pts = np.column_stack([np.arange(5.0), np.zeros(5)])
    surf = estimate_normals(pts, 2.0, sensor_origin=(2.0, 3.0))
    assert surf.valid.all()
    np.testing.assert_allclose(np.abs(surf.normals), [[0, 1]] * 5, atol=1e-12)
    # oriented toward the sensor at y = 3
    assert np.all(surf.normals[:, 1] > 0)


def test_normals_isolated_points_invalid():
    surf = estimate_normals([[0, 0], [10, 0]], 2.0)
    assert not surf.valid.any()


def test_normals_duplicate_points_invalid():
    surf = estimate_normals([[1, 1]] * 4, 2.0)
    assert not surf.valid.any()


def test_normals_on_noisy_diagonal():
    rng = np.random.default_rng(2)
    t = np.linspace(0, 20, 200)
    pts = np.column_stack([t, t]) + rng.normal(scale=0.02, size=(200, 2))
    surf = estimate_normals(pts, 2.0, sensor_origin=(0.0, 30.0))
    expected = np.array([-math.sqrt(0.5), math.sqrt(0.5)])
    cosang = np.abs(surf.normals[surf.valid] @ expected)
    assert surf.valid.all()
    assert np.all(cosang >= math.cos(math.radians(2.0)))


def _wavy_cloud(seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 30, 150))
    return np.column_stack([t + 3.0, np.sin(t / 3.0) * 4.0 + 8.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-math.pi, math.pi))
def test_normals_rotation_equivariant(seed, th):
    pts = _wavy_cloud(seed)
    rot = Pose.from_xytheta(0, 0, th)
    a = estimate_normals(pts, 2.0)
    b = estimate_normals(rot.apply(pts), 2.0)
    assert np.array_equal(a.valid, b.valid)
    np.testing.assert_allclose(rot.rotate(a.normals[a.valid]), b.normals[b.valid], atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-20, 20), st.floats(-20, 20))
def test_normals_translation_invariant(seed, dx, dy):
    pts = _wavy_cloud(seed)
    shift = np.array([dx, dy])
    a = estimate_normals(pts, 2.0, sensor_origin=(0, 0))
    b = estimate_normals(pts + shift, 2.0, sensor_origin=shift)
    assert np.array_equal(a.valid, b.valid)
    np.testing.assert_allclose(a.normals, b.normals, atol=1e-6)


def test_surface_cloud_requires_unit_normals():
    with pytest.raises(ValueError):
        SurfaceCloud([[0, 0]], [[2.0, 0.0]], [True])


def test_source_cloud_rejects_nonfinite():
    with pytest.raises(ValueError):
        SourceCloud([[0.0, np.nan]])


def test_cloud_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(5)
    src = SourceCloud(rng.normal(size=(50, 2)) * 1e3)
    save_cloud(src, tmp_path / "s.csv")
    back = load_cloud(tmp_path / "s.csv")
    assert isinstance(back, SourceCloud)
    assert np.array_equal(back.points, src.points)

    surf = estimate_normals(_wavy_cloud(1), 2.0)
    save_cloud(surf, tmp_path / "d.csv")
    back = load_cloud(tmp_path / "d.csv")
    assert isinstance(back, SurfaceCloud)
    assert np.array_equal(back.points, surf.points)
    assert np.array_equal(back.normals, surf.normals)
    assert np.array_equal(back.valid, surf.valid)


def test_load_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert len(load_cloud(p)) == 0


def test_load_wrong_column_count_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("# bp-scanmatch cloud v1 source\n1,2\n3,4,5\n")
    with pytest.raises(CloudFormatError, match=":3:"):
        load_cloud(p)


def test_load_non_numeric_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("# bp-scanmatch cloud v1 source\n1,abc\n")
    with pytest.raises(CloudFormatError, match=":2:"):
        load_cloud(p)


def test_load_missing_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2\n")
    with pytest.raises(CloudFormatError, match=":1:"):
        load_cloud(p)
