import numpy as np

from prioropt import io
from prioropt.geometry import icosphere


def _roundtrip_bytes(tmp_path, write, read, obj, name):
    p1 = tmp_path / f"a_{name}"
    p2 = tmp_path / f"b_{name}"
    write(p1, obj)
    write(p2, read(p1))
    return p1.read_bytes() == p2.read_bytes()


def test_points_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pts, nrm = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    io.write_points(tmp_path / "p.ply", pts, nrm)
    p2, n2 = io.read_points(tmp_path / "p.ply")
    assert np.array_equal(pts, p2) and np.array_equal(nrm, n2)
    assert _roundtrip_bytes(tmp_path, lambda p, o: io.write_points(p, *o), io.read_points, (pts, nrm), "pc.ply")
    assert _roundtrip_bytes(tmp_path, lambda p, o: io.write_points(p, *o), io.read_points, (pts, None), "p.ply")


def test_sdf_samples_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pts, s = rng.normal(size=(10, 3)), rng.normal(size=10)
    assert _roundtrip_bytes(tmp_path, lambda p, o: io.write_sdf_samples(p, *o), io.read_sdf_samples, (pts, s), "s.ply")
    p2, s2 = io.read_sdf_samples(tmp_path / "a_s.ply")
    assert np.array_equal(s, s2)


def test_mesh_formats_roundtrip(tmp_path):
    mesh = icosphere(1)
    assert _roundtrip_bytes(tmp_path, io.write_obj, io.read_obj, mesh, "m.obj")
    assert _roundtrip_bytes(tmp_path, io.write_ply_mesh, io.read_ply_mesh, mesh, "m.ply")
    m2 = io.read_ply_mesh(tmp_path / "a_m.ply")
    assert np.array_equal(m2.vertices, mesh.vertices) and np.array_equal(m2.triangles, mesh.triangles)


def test_images_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    img, mask = rng.random((5, 7, 3)), (rng.random((5, 7)) > 0.5).astype(float)
    assert _roundtrip_bytes(tmp_path, io.write_ppm, io.read_ppm, img, "i.ppm")
    assert _roundtrip_bytes(tmp_path, io.write_pgm, io.read_pgm, mask, "m.pgm")
    assert np.array_equal(io.read_pgm(tmp_path / "a_m.pgm"), mask)
    assert np.max(np.abs(io.read_ppm(tmp_path / "a_i.ppm") - img)) <= 0.5 / 255 + 1e-12
