import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prioropt import geometry as geo
from prioropt.geometry import AnalyticShape, TriMesh, sphere


def test_sphere_sdf_values():
    s = sphere()
    np.testing.assert_allclose(s(np.array([[0, 0, 0], [0.6, 0.8, 0], [2, 0, 0.0]])), [-1, 0, 1], atol=1e-15)


@pytest.mark.parametrize("shape", [
    AnalyticShape("box", {"half_extents": np.array([0.3, 0.4, 0.5])}),
    AnalyticShape("torus", {"major": 0.5, "minor": 0.2}, rotation=geo.rotation_matrix([1, 1, 0], 0.7)),
    AnalyticShape("capsule", {"half_length": 0.3, "radius": 0.25}, translation=np.array([0.1, 0, 0])),
])
def test_exact_primitives_match_brute_force_distance(shape):
    # oracle: distance to a dense surface sample, signed by the sdf sign
    surf, _ = geo.sample_surface(shape, 40000, seed=3)
    rng = np.random.default_rng(0)
    q = rng.uniform(-0.9, 0.9, size=(200, 3))
    d = np.sqrt(geo.nearest_sq_dist(q, surf, method="tree")[0])
    s = shape(q)
    assert np.all(np.abs(np.abs(s) - d) < 0.02)


def test_sdf_sampling_sphere_exact_and_seeded():
    p, s = geo.sample_sdf_field(sphere(), 3000, seed=4)
    np.testing.assert_allclose(s, np.linalg.norm(p, axis=1) - 1.0, atol=1e-9)
    p2, s2 = geo.sample_sdf_field(sphere(), 3000, seed=4)
    assert np.array_equal(p, p2) and np.array_equal(s, s2)
    assert np.sum(np.all(np.abs(p) <= 1.0, axis=1)) >= 150


def test_mesh_signed_distance_vs_analytic():
    ico = geo.icosphere(4)
    p, s = geo.sample_sdf_field(sphere(), 1500, seed=1)
    ms = geo.mesh_signed_distance(ico, p)
    assert np.max(np.abs(ms - s)) < 2e-3


def test_mesh_sdf_rejects_open_mesh():
    ico = geo.icosphere(1)
    open_mesh = TriMesh(ico.vertices, ico.triangles[1:])
    with pytest.raises(ValueError, match="watertight"):
        geo.sample_sdf_field(open_mesh, 10, strategy="uniform")


def test_sphere_surface_samples():
    p, n = geo.sample_surface(sphere(), 2000, seed=0)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(n, p, atol=1e-9)
    p2, _ = geo.sample_surface(sphere(), 2000, seed=0)
    assert np.array_equal(p, p2)


def test_sphere_octant_histogram():
    n = 8000
    p, _ = geo.sample_surface(sphere(), n, seed=11)
    octant = (p[:, 0] > 0) * 4 + (p[:, 1] > 0) * 2 + (p[:, 2] > 0)
    counts = np.bincount(octant, minlength=8)
    assert np.all(np.abs(counts - n / 8) <= 4 * np.sqrt(n))


def test_marching_cubes_all_negative_is_empty():
    mesh = geo.marching_cubes(lambda p: -np.ones(len(p)), 8)
    assert mesh.empty


def test_marching_cubes_single_corner_single_triangle():
    vol = -np.ones((2, 2, 2))
    vol[1, 1, 1] = 1.0
    assert len(geo.marching_cubes_grid(vol).triangles) == 1


def test_marching_cubes_sphere_radius_and_topology():
    res = 64
    mesh = geo.marching_cubes(sphere(), res)
    cell = 2 * geo.GRID_BOUND / (res - 1)
    assert np.all(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 1.0) < 1.5 * cell)
    assert mesh.euler_characteristic() == 2
    # outward orientation: positive enclosed volume
    assert abs(mesh.signed_volume() - 4 / 3 * np.pi) < 0.05


def test_chamfer_fscore_trivial():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0, 0]])
    assert geo.chamfer(a, b) == 1.0
    assert geo.fscore(a, b, 0.5) == 0.0
    assert geo.fscore(a, b, 2.0) == 100.0
    pts = np.random.default_rng(0).normal(size=(50, 3))
    assert geo.chamfer(pts, pts) == 0.0
    assert geo.fscore(pts, pts) == 100.0
    with pytest.raises(ValueError):
        geo.chamfer(np.zeros((0, 3)), a)
    with pytest.raises(ValueError):
        geo.fscore(a, b, 0.0)


def test_normal_consistency_trivial():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(100, 3))
    n = rng.normal(size=(100, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    assert geo.normal_consistency(p, n, p, n) == pytest.approx(1.0)
    assert geo.normal_consistency(p, n, p, -n) == pytest.approx(1.0)
    ez = np.tile([0, 0, 1.0], (100, 1))
    ex = np.tile([1.0, 0, 0], (100, 1))
    assert geo.normal_consistency(p, ez, p, ex) == 0.0
    with pytest.raises(ValueError):
        geo.normal_consistency(p, 2 * ez, p, ez)


def test_accelerated_matches_brute_force():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(-1, 1, (2000, 3)), rng.uniform(-1, 1, (2000, 3))
    assert abs(geo.chamfer(a, b, "brute") - geo.chamfer(a, b, "tree")) < 1e-12
    assert abs(geo.fscore(a, b, 0.05, "brute") - geo.fscore(a, b, 0.05, "tree")) < 1e-12


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(60, 3)), rng.normal(size=(70, 3))
    na = rng.normal(size=(60, 3))
    nb = rng.normal(size=(70, 3))
    na /= np.linalg.norm(na, axis=1, keepdims=True)
    nb /= np.linalg.norm(nb, axis=1, keepdims=True)
    assert geo.chamfer(a, b) == pytest.approx(geo.chamfer(b, a), abs=1e-15)
    assert geo.fscore(a, b, 0.5) == pytest.approx(geo.fscore(b, a, 0.5))
    R = geo.rotation_matrix(rng.normal(size=3), rng.uniform(0, 6))
    t = rng.normal(size=3)
    ra, rb = a @ R.T + t, b @ R.T + t
    assert abs(geo.chamfer(a, b) - geo.chamfer(ra, rb)) < 1e-9
    assert abs(geo.fscore(a, b, 0.5) - geo.fscore(ra, rb, 0.5)) < 1e-9
    nc = geo.normal_consistency(a, na, b, nb)
    assert abs(nc - geo.normal_consistency(ra, na @ R.T, rb, nb @ R.T)) < 1e-9


def test_metric_report_ranges():
    rep = geo.evaluate(sphere(), sphere(), n_points=2000)
    assert rep.chamfer_mean >= 0 and 0 <= rep.fscore <= 100 and 0 <= rep.normal_consistency <= 1
    assert rep.normal_consistency > 0.99
    with pytest.raises(ValueError):
        geo.MetricReport(-1.0, 50.0, 0.5, 0.02, 10)


def test_shape_dict_roundtrip():
    u = AnalyticShape("smooth-union", {"k": 0.1}, children=[
        sphere(0.4, (0.2, 0, 0)), AnalyticShape("box", {"half_extents": np.array([0.2, 0.3, 0.2])})])
    v = AnalyticShape.from_dict(u.to_dict())
    q = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    np.testing.assert_array_equal(u(q), v(q))
    assert not u.exact and sphere().exact
