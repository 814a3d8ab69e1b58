"""Procedural shape families, observation baking and on-disk observation sets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import io
from .geometry import AnalyticShape
from .render import Camera, hemisphere_cameras, shade_flat

PRIMITIVES = ("sphere", "box", "torus", "capsule")


# ------------------------------------------------------------ observations

@dataclass
class SdfObservation:
    points: np.ndarray
    sdf: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.sdf = np.asarray(self.sdf, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.sdf):
            raise ValueError("points and sdf values differ in count")

    def subsample(self, n: int, rng: np.random.Generator) -> "SdfObservation":
        if n >= len(self.sdf):
            return self
        idx = rng.choice(len(self.sdf), n, replace=False)
        return SdfObservation(self.points[idx], self.sdf[idx])


@dataclass
class PointObservation:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    def subsample(self, n: int, rng: np.random.Generator) -> "PointObservation":
        if n >= len(self.points):
            return self
        idx = rng.choice(len(self.points), n, replace=False)
        return PointObservation(self.points[idx], None if self.normals is None else self.normals[idx])


@dataclass
class PosedView:
    image: np.ndarray
    mask: np.ndarray
    camera: Camera


@dataclass
class ViewObservation:
    views: list

    def __post_init__(self):
        if not self.views:
            raise ValueError("a view set needs at least one camera")
        shapes = {v.image.shape for v in self.views}
        if len(shapes) != 1:
            raise ValueError("all views must share one resolution")

    def subset(self, idx) -> "ViewObservation":
        return ViewObservation([self.views[i] for i in idx])

    def subsample(self, n: int, rng: np.random.Generator) -> "ViewObservation":
        if n >= len(self.views):
            return self
        return self.subset(sorted(rng.choice(len(self.views), n, replace=False)))


# ----------------------------------------------------------------- family

@dataclass
class ShapeFamilySpec:
    """Parameter ranges for a procedural family. ``gap`` widens test ranges.

    With ``gap > 0`` every test shape draws its size from the bands just
    outside the train range (each band ``gap`` times the range width).
    """

    seed: int = 0
    n_shapes: int = 10
    kinds: tuple = PRIMITIVES
    size_range: tuple = (0.45, 0.65)
    aspect_range: tuple = (0.75, 1.25)
    translation_max: float = 0.08
    max_parts: int = 1
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    gap: float = 0.0

    def __post_init__(self):
        for name in ("size_range", "aspect_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a nonempty interval")
        if not self.kinds:
            raise ValueError("at least one primitive kind is required")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-12:
            raise ValueError("split fractions must sum to 1")
        if self.gap < 0 or self.max_parts < 1 or self.n_shapes < 1:
            raise ValueError("invalid family spec")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        return d


@dataclass
class ShapeRecord:
    id: str
    split: str
    params: dict
    shape: AnalyticShape = field(repr=False)

    def to_dict(self) -> dict:
        return {"id": self.id, "split": self.split, "params": self.params, "shape": self.shape.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeRecord":
        return cls(d["id"], d["split"], d["params"], AnalyticShape.from_dict(d["shape"]))


def _primitive(kind: str, size: float, aspect: np.ndarray) -> AnalyticShape:
    if kind == "sphere":
        return AnalyticShape("sphere", {"radius": size})
    if kind == "box":
        return AnalyticShape("box", {"half_extents": 0.75 * size * aspect})
    if kind == "torus":
        return AnalyticShape("torus", {"major": 0.7 * size, "minor": 0.3 * size * aspect[0]})
    if kind == "capsule":
        return AnalyticShape("capsule", {"half_length": 0.5 * size * aspect[2], "radius": 0.45 * size})
    raise ValueError(f"unknown primitive {kind!r}")


def _draw_size(rng, spec: ShapeFamilySpec, test: bool) -> float:
    lo, hi = spec.size_range
    if not test or spec.gap == 0:
        return float(rng.uniform(lo, hi))
    w = spec.gap * (hi - lo)
    # pick the lower or upper out-of-range band
    return float(rng.uniform(lo - w, lo) if rng.random() < 0.5 else rng.uniform(hi, hi + w))


def generate_family(spec: ShapeFamilySpec) -> dict:
    """Return ``{"train": [ShapeRecord], "test": [ShapeRecord]}``, reproducible from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n_test = int(round(spec.n_shapes * spec.test_fraction))
    n_train = spec.n_shapes - n_test
    out = {"train": [], "test": []}
    for i in range(spec.n_shapes):
        split = "train" if i < n_train else "test"
        n_parts = int(rng.integers(1, spec.max_parts + 1))
        parts, part_params = [], []
        for _ in range(n_parts):
            kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
            size = _draw_size(rng, spec, split == "test")
            aspect = rng.uniform(*spec.aspect_range, size=3)
            axis = rng.normal(size=3)
            angle = float(rng.uniform(0, math.pi))
            t = rng.uniform(-spec.translation_max, spec.translation_max, size=3)
            scale = 1.0 if n_parts == 1 else 0.7
            prim = _primitive(kind, size * scale, aspect)
            prim.rotation = geo.rotation_matrix(axis, angle)
            prim.translation = t
            parts.append(prim)
            part_params.append({"kind": kind, "size": size, "aspect": aspect.tolist(),
                                "axis": axis.tolist(), "angle": angle, "translation": t.tolist()})
        albedo = tuple(float(a) for a in rng.uniform(0.4, 0.95, size=3))
        shape = parts[0] if n_parts == 1 else AnalyticShape("smooth-union", {"k": 0.08}, children=parts)
        shape.albedo = albedo
        rec = ShapeRecord(f"shape_{i:03d}", split, {"parts": part_params, "albedo": list(albedo)}, shape)
        out[split].append(rec)
    return out


def write_family(path, spec: ShapeFamilySpec, family: dict) -> Path:
    return io.write_json(path, {"spec": spec.to_dict(),
                                "shapes": [r.to_dict() for s in ("train", "test") for r in family[s]]})


def read_family(path) -> tuple[ShapeFamilySpec, dict]:
    d = io.read_json(path)
    spec_d = dict(d["spec"])
    spec_d["kinds"] = tuple(spec_d["kinds"])
    for k in ("size_range", "aspect_range"):
        spec_d[k] = tuple(spec_d[k])
    fam = {"train": [], "test": []}
    for s in d["shapes"]:
        rec = ShapeRecord.from_dict(s)
        fam[rec.split].append(rec)
    return ShapeFamilySpec(**spec_d), fam


# ------------------------------------------------------------------ baking

DEFAULT_COUNTS = {"sdf": 20000, "views": 8, "resolution": 64, "points": 300, "train_points": 2000}


def bake_view_set(shape: AnalyticShape, n_views: int, resolution: int, seed: int,
                  steps: int = 128) -> ViewObservation:
    cams = hemisphere_cameras(n_views, width=resolution, height=resolution, seed=seed)
    views = []
    for cam in cams:
        img, mask = shade_flat(shape.sdf, shape.albedo, cam, steps)
        views.append(PosedView(img, mask, cam))
    return ViewObservation(views)


def bake_observations(shape: AnalyticShape, task: str, counts: dict | None = None, seed: int = 0,
                      out_dir=None, name: str = "obs"):
    """Sample one observation for ``task`` and optionally write it under ``out_dir``.

    sdf → ``<name>_sdf.ply``; pc → ``<name>_points.ply``; mvs → one PPM/PGM
    pair per view plus ``<name>_cameras.json``.
    """
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    for k, v in counts.items():
        if v < 1:
            raise ValueError(f"count {k} must be >= 1")
    if task == "sdf":
        obs = SdfObservation(*geo.sample_sdf_field(shape, counts["sdf"], seed=seed))
    elif task == "pc":
        obs = PointObservation(*geo.sample_surface(shape, counts["points"], seed=seed))
    elif task == "mvs":
        obs = bake_view_set(shape, counts["views"], counts["resolution"], seed)
    else:
        raise ValueError(f"unknown task {task!r}")
    if out_dir is not None:
        write_observation(obs, out_dir, name)
    return obs


def write_observation(obs, out_dir, name: str = "obs") -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if isinstance(obs, SdfObservation):
            return io.write_sdf_samples(out_dir / f"{name}_sdf.ply", obs.points, obs.sdf)
        if isinstance(obs, PointObservation):
            return io.write_points(out_dir / f"{name}_points.ply", obs.points, obs.normals)
        entries = []
        for i, v in enumerate(obs.views):
            img, msk = f"{name}_view{i:02d}.ppm", f"{name}_mask{i:02d}.pgm"
            io.write_ppm(out_dir / img, v.image)
            io.write_pgm(out_dir / msk, v.mask)
            entries.append({**v.camera.to_dict(), "image": img, "mask": msk})
        return io.write_json(out_dir / f"{name}_cameras.json", {"views": entries})
    except OSError as e:
        raise OSError(f"failed writing observation to {out_dir}: {e}") from e


def read_observation(path):
    """Load an observation from a file written by :func:`write_observation`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.name.endswith("_sdf.ply"):
        return SdfObservation(*io.read_sdf_samples(path))
    if path.suffix == ".ply":
        return PointObservation(*io.read_points(path))
    if path.suffix == ".json":
        d = io.read_json(path)
        views = [PosedView(io.read_ppm(path.parent / e["image"]), io.read_pgm(path.parent / e["mask"]),
                           Camera.from_dict(e)) for e in d["views"]]
        return ViewObservation(views)
    raise ValueError(f"unrecognized observation file {path}")
