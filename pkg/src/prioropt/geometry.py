"""Ground-truth shapes, sampling, mesh extraction and point-set metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from . import tensor_autodiff as ad
from .tensor_autodiff import Dual, Tensor

GRID_BOUND = 1.05
EXACT_KINDS = {"sphere", "box", "torus", "capsule"}


# --------------------------------------------------------------- analytic

@dataclass
class AnalyticShape:
    """Procedural solid. ``params`` depend on ``kind``:

    sphere: radius; box: half_extents (3,); torus: major, minor (ring in the
    local xy-plane); capsule: half_length, radius (axis along local z);
    superquadric: radii (3,), e1, e2; union / smooth-union: ``children``
    (and ``k`` for the smooth blend).
    """

    kind: str
    params: dict = field(default_factory=dict)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    children: list = field(default_factory=list)
    albedo: tuple = (0.8, 0.8, 0.8)

    @property
    def exact(self) -> bool:
        """True when ``sdf`` is an exact distance; unions are only bounds."""
        return self.kind in EXACT_KINDS

    def sdf(self, p) -> Dual:
        p = ad.lift(p)
        q = (p - Tensor(self.translation)) @ Tensor(self.rotation)
        kind, P = self.kind, self.params
        if kind == "sphere":
            return ad.d_norm(q) - P["radius"]
        if kind == "box":
            d = ad.d_abs(q) - Tensor(np.asarray(P["half_extents"], dtype=float))
            outside = ad.d_norm(ad.d_maximum(d, 0.0))
            inside = ad.d_minimum(ad.d_maximum(ad.d_maximum(d[..., 0], d[..., 1]), d[..., 2]), 0.0)
            return outside + inside
        if kind == "torus":
            ring = ad.d_sqrt(q[..., 0] * q[..., 0] + q[..., 1] * q[..., 1] + 1e-300) - P["major"]
            return ad.d_sqrt(ring * ring + q[..., 2] * q[..., 2]) - P["minor"]
        if kind == "capsule":
            h = P["half_length"]
            zc = ad.d_clamp(q[..., 2], -h, h)
            dz = q[..., 2] - zc
            return ad.d_sqrt(q[..., 0] * q[..., 0] + q[..., 1] * q[..., 1] + dz * dz) - P["radius"]
        if kind == "superquadric":
            a, b, c = P["radii"]
            e1, e2 = P["e1"], P["e2"]
            ax = ad.d_power(ad.d_abs(q[..., 0]) * (1.0 / a) + 1e-12, 2.0 / e2)
            ay = ad.d_power(ad.d_abs(q[..., 1]) * (1.0 / b) + 1e-12, 2.0 / e2)
            az = ad.d_power(ad.d_abs(q[..., 2]) * (1.0 / c) + 1e-12, 2.0 / e1)
            F = ad.d_power(ad.d_power(ax + ay, e2 / e1) + az, e1 / 2.0)
            return (F - 1.0) * min(a, b, c)
        if kind in ("union", "smooth-union"):
            d = self.children[0].sdf(q)
            for child in self.children[1:]:
                d2 = child.sdf(q)
                if kind == "union":
                    d = ad.d_minimum(d, d2)
                else:
                    k = P.get("k", 0.1)
                    h = ad.d_clamp(0.5 + (d2 - d) * (0.5 / k), 0.0, 1.0)
                    d = d2 + (d - d2) * h - h * (1.0 - h) * k
            return d
        raise ValueError(f"unknown shape kind {kind!r}")

    def __call__(self, p: np.ndarray) -> np.ndarray:
        """Plain numpy evaluation."""
        p = np.asarray(p, dtype=np.float64)
        return self.sdf(Dual(Tensor(p))).primal.data

    def gradient(self, p: np.ndarray) -> np.ndarray:
        return ad.spatial_gradient(self.sdf, np.asarray(p, dtype=np.float64))[1].data

    def to_dict(self) -> dict:
        out = {"kind": self.kind,
               "params": {k: (list(map(float, v)) if np.ndim(v) else float(v)) for k, v in self.params.items()},
               "rotation": np.asarray(self.rotation).tolist(),
               "translation": np.asarray(self.translation).tolist(),
               "albedo": list(self.albedo)}
        if self.children:
            out["children"] = [c.to_dict() for c in self.children]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticShape":
        return cls(d["kind"],
                   {k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d["params"].items()},
                   np.asarray(d["rotation"], dtype=float), np.asarray(d["translation"], dtype=float),
                   [cls.from_dict(c) for c in d.get("children", [])],
                   tuple(d.get("albedo", (0.8, 0.8, 0.8))))


def sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> AnalyticShape:
    return AnalyticShape("sphere", {"radius": float(radius)}, translation=np.asarray(center, dtype=float))


def rotation_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


# ------------------------------------------------------------------- meshes

@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def cleaned(self, min_area: float = 1e-14) -> "TriMesh":
        """Drop degenerate triangles and unreferenced vertices."""
        tri = self.triangles[self.areas() > min_area]
        used, inverse = np.unique(tri.reshape(-1), return_inverse=True)
        normals = None if self.normals is None else self.normals[used]
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3), normals)

    def vertex_normals(self) -> np.ndarray:
        n = np.zeros_like(self.vertices)
        fn = self.face_normals(normalize=False)
        for k in range(3):
            np.add.at(n, self.triangles[:, k], fn)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges()) + len(self.triangles)

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def icosphere(subdivisions: int = 0, radius: float = 1.0) -> TriMesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(x, dtype=float) / np.linalg.norm(x) for x in verts]
    f = list(faces)
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(v) * radius, np.array(f))


def _closest_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, all broadcastable (..., 3).

    Returns (closest, region) with region 0 = face, 1..3 = vertex a/b/c,
    4..6 = edge ab/bc/ca.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    shape = np.broadcast_shapes(d1.shape, va.shape)
    region = np.zeros(shape, dtype=np.int8)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[..., None] + ac * w[..., None]
        out = np.broadcast_to(out, shape + (3,)).copy()

        def put(mask, pts, code):
            nonlocal region
            mask = mask & (region == 0) & ~done
            out[mask] = np.broadcast_to(pts, shape + (3,))[mask]
            region[mask] = code
            done[mask] = True

        done = np.zeros(shape, dtype=bool)
        put((d1 <= 0) & (d2 <= 0), a, 1)
        put((d3 >= 0) & (d4 <= d3), b, 2)
        put((d6 >= 0) & (d5 <= d6), c, 3)
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t[..., None], 4)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + (c - b) * t[..., None], 5)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t[..., None], 6)
    return out, region


def _pseudo_normals(mesh: TriMesh):
    """Angle-weighted vertex normals and edge normals keyed by sorted vertex pair."""
    v = mesh.vertices[mesh.triangles]
    fn = mesh.face_normals()
    vn = np.zeros_like(mesh.vertices)
    for k in range(3):
        e1 = v[:, (k + 1) % 3] - v[:, k]
        e2 = v[:, (k + 2) % 3] - v[:, k]
        cosang = np.einsum("ij,ij->i", e1, e2) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(vn, mesh.triangles[:, k], fn * ang[:, None])
    edge_n = {}
    for f, tri in enumerate(mesh.triangles):
        for i, j in ((0, 1), (1, 2), (2, 0)):
            key = (min(tri[i], tri[j]), max(tri[i], tri[j]))
            edge_n.setdefault(key, []).append(f)
    return fn, vn, edge_n


def mesh_signed_distance(mesh: TriMesh, points: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Signed distance to a closed mesh, signed with angle-weighted pseudo-normals."""
    points = np.asarray(points, dtype=np.float64)
    fn, vn, edge_faces = _pseudo_normals(mesh)
    bad = [k for k, fs in edge_faces.items() if len(fs) != 2]
    if bad:
        raise ValueError(f"mesh is not watertight ({len(bad)} boundary or non-manifold edges); "
                         "use an analytic shape for signed sampling")
    tri = mesh.vertices[mesh.triangles]
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        cl, region = _closest_on_triangles(p, a, b, c)
        d2 = np.sum((p - cl) ** 2, axis=-1)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(best))
        q = cl[rows, best]
        reg = region[rows, best]
        normals = np.empty((len(best), 3))
        for i, (f, r) in enumerate(zip(best, reg)):
            t = mesh.triangles[f]
            if r == 0:
                normals[i] = fn[f]
            elif r <= 3:
                normals[i] = vn[t[r - 1]]
            else:
                i0, i1 = {4: (0, 1), 5: (1, 2), 6: (2, 0)}[int(r)]
                key = (min(t[i0], t[i1]), max(t[i0], t[i1]))
                normals[i] = fn[edge_faces[key]].sum(axis=0)
        diff = points[s:s + chunk] - q
        sign = np.where(np.einsum("ij,ij->i", diff, normals) < 0, -1.0, 1.0)
        out[s:s + chunk] = sign * np.sqrt(d2[rows, best])
    return out


# ----------------------------------------------------------------- sampling

def sample_mesh_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    u, v = 1 - s, s * (1 - r2)
    w = s * r2
    tri = mesh.vertices[mesh.triangles[face]]
    pts = tri[:, 0] * u[:, None] + tri[:, 1] * v[:, None] + tri[:, 2] * w[:, None]
    return pts, mesh.face_normals()[face]


def _project_to_surface(shape: AnalyticShape, p: np.ndarray, iters: int = 8) -> np.ndarray:
    for _ in range(iters):
        val, g = ad.spatial_gradient(shape.sdf, p)
        g = g.data
        p = p - (val.data / np.maximum(np.sum(g * g, axis=-1), 1e-12))[:, None] * g
    return p


def sample_surface(shape, n: int, seed: int = 0, with_normals: bool = True, resolution: int = 96):
    """Uniform surface samples ``(points, normals or None)``.

    Analytic spheres are sampled in closed form; other analytic shapes are
    sampled on a fine extracted mesh and projected back onto the surface.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(shape, TriMesh):
        pts, nrm = sample_mesh_surface(shape, n, rng)
        return pts, (nrm if with_normals else None)
    if shape.kind == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = d @ shape.rotation.T * shape.params["radius"] + shape.translation
        nrm = d @ shape.rotation.T
        return pts, (nrm if with_normals else None)
    mesh = marching_cubes(shape, resolution)
    pts, _ = sample_mesh_surface(mesh, n, rng)
    pts = _project_to_surface(shape, pts)
    if not with_normals:
        return pts, None
    g = shape.gradient(pts)
    return pts, g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)


def sample_sdf_field(shape, n: int, seed: int = 0, strategy: str = "deepsdf",
                     scales=(0.005, 0.05), uniform_fraction: float = 0.05):
    """Points and signed distances ``(p, s)``.

    ``deepsdf``: 95% jittered surface samples split over two noise scales,
    the rest uniform in [-1, 1]^3. ``uniform``: all points uniform.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if strategy == "uniform":
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    elif strategy == "deepsdf":
        n_uni = int(round(n * uniform_fraction))
        n_near = n - n_uni
        surf, _ = sample_surface(shape, n_near, seed=int(rng.integers(2**31)), with_normals=False)
        sig = np.asarray(scales)[np.arange(n_near) % len(scales)]
        near = surf + rng.normal(size=(n_near, 3)) * sig[:, None]
        pts = np.concatenate([near, rng.uniform(-1.0, 1.0, size=(n_uni, 3))])
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    if isinstance(shape, TriMesh):
        s = mesh_signed_distance(shape, pts)
    else:
        s = shape(pts)
    return pts, s


# ---------------------------------------------------------- marching cubes

def grid_points(resolution: int, bound: float = GRID_BOUND) -> np.ndarray:
    ax = np.linspace(-bound, bound, resolution)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def marching_cubes(field_fn, resolution: int = 128, iso: float = 0.0, bound: float = GRID_BOUND,
                   chunk: int = 262144) -> TriMesh:
    """Triangulate ``{field = iso}`` sampled on a ``resolution^3`` grid over [-bound, bound]^3.

    Faces are oriented so normals point toward increasing field values.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    pts = grid_points(resolution, bound).reshape(-1, 3)
    vals = np.concatenate([np.asarray(field_fn(pts[i:i + chunk]), dtype=np.float64)
                           for i in range(0, len(pts), chunk)])
    return marching_cubes_grid(vals.reshape((resolution,) * 3), iso, bound)


def marching_cubes_grid(volume: np.ndarray, iso: float = 0.0, bound: float = GRID_BOUND) -> TriMesh:
    volume = np.asarray(volume, dtype=np.float64)
    if not np.all(np.isfinite(volume)):
        raise ValueError("field is not finite on the grid")
    if volume.min() > iso or volume.max() < iso:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    res = volume.shape[0]
    step = 2.0 * bound / (res - 1)
    verts, faces, _, _ = measure.marching_cubes(volume, level=iso, spacing=(step,) * 3,
                                                gradient_direction="ascent", allow_degenerate=False)
    mesh = TriMesh(verts - bound, faces).cleaned()
    if not mesh.empty:
        # outward = toward increasing field: compare face normal with the local field gradient
        g = np.stack(np.gradient(volume, step), axis=-1)
        centers = mesh.vertices[mesh.triangles].mean(axis=1)
        idx = np.clip(np.rint((centers + bound) / step).astype(int), 0, res - 1)
        gc = g[idx[:, 0], idx[:, 1], idx[:, 2]]
        if np.sum(np.einsum("ij,ij->i", mesh.face_normals(), gc)) < 0:
            mesh = TriMesh(mesh.vertices, mesh.triangles[:, ::-1])
    return mesh


# ------------------------------------------------------------------ metrics

BRUTE_FORCE_LIMIT = 5000


def nearest_sq_dist(a: np.ndarray, b: np.ndarray, method: str = "auto", chunk: int = 1024):
    """Squared distance and index of each point of ``a``'s nearest neighbor in ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if method == "auto":
        method = "brute" if max(len(a), len(b)) <= BRUTE_FORCE_LIMIT else "tree"
    if method == "tree":
        _, idx = cKDTree(b).query(a, k=1)
    else:
        idx = np.empty(len(a), dtype=np.int64)
        for s in range(0, len(a), chunk):
            d2 = np.sum((a[s:s + chunk, None, :] - b[None, :, :]) ** 2, axis=-1)
            idx[s:s + chunk] = np.argmin(d2, axis=1)
    # distances recomputed from the matched pairs so both paths agree exactly
    d2 = np.sum((a - b[idx]) ** 2, axis=-1)
    return d2, idx


def _check_nonempty(a, b):
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be nonempty")


def chamfer(a, b, method: str = "auto") -> float:
    """Symmetric mean squared nearest-neighbor distance, halved."""
    _check_nonempty(a, b)
    dab, _ = nearest_sq_dist(a, b, method)
    dba, _ = nearest_sq_dist(b, a, method)
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


def fscore(a, b, tau: float = 0.02, method: str = "auto") -> float:
    """F-score in percent at distance threshold ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    _check_nonempty(a, b)
    dab, _ = nearest_sq_dist(a, b, method)
    dba, _ = nearest_sq_dist(b, a, method)
    precision = 100.0 * float(np.mean(np.sqrt(dab) <= tau))
    recall = 100.0 * float(np.mean(np.sqrt(dba) <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def normal_consistency(a, na, b, nb, method: str = "auto") -> float:
    """Symmetric mean absolute cosine between normals of nearest-neighbor pairs."""
    _check_nonempty(a, b)
    for n in (na, nb):
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
            raise ValueError("normals must have unit length")
    _, iab = nearest_sq_dist(a, b, method)
    _, iba = nearest_sq_dist(b, a, method)
    ab = np.abs(np.einsum("ij,ij->i", na, nb[iab]))
    ba = np.abs(np.einsum("ij,ij->i", nb, na[iba]))
    return 0.5 * (float(ab.mean()) + float(ba.mean()))


@dataclass
class MetricReport:
    chamfer_mean: float
    fscore: float
    normal_consistency: float
    tau: float
    n_points: int

    def __post_init__(self):
        if not 0.0 <= self.fscore <= 100.0:
            raise ValueError("fscore out of range")
        if self.chamfer_mean < 0:
            raise ValueError("chamfer must be non-negative")

    @property
    def chamfer_x1e3(self) -> float:
        return 1e3 * self.chamfer_mean

    def to_dict(self) -> dict:
        return {"chamfer_mean": self.chamfer_mean, "chamfer_x1e3": self.chamfer_x1e3,
                "fscore": self.fscore, "normal_consistency": self.normal_consistency,
                "tau": self.tau, "n_points": self.n_points}


def evaluate(pred, gt, n_points: int = 10000, tau: float = 0.02, seed: int = 0) -> MetricReport:
    """Compare two surfaces (TriMesh, AnalyticShape, or oriented point pairs)."""
    def cloud(s, sd):
        if isinstance(s, tuple):
            return s
        if isinstance(s, TriMesh) and s.empty:
            raise ValueError("cannot evaluate an empty mesh")
        return sample_surface(s, n_points, seed=sd, with_normals=True)

    # one seed for both sides: identical surfaces give identical clouds
    pa, na = cloud(pred, seed)
    pb, nb = cloud(gt, seed)
    return MetricReport(chamfer(pa, pb), fscore(pa, pb, tau), normal_consistency(pa, na, pb, nb),
                        tau, len(pa))
