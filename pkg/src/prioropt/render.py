"""Differentiable rendering of implicit fields.

Rays are marched with plain numpy (no tape). Only the final surface points
and the per-ray minimum points are re-evaluated on the tape, and depth is
attached to the graph through the implicit relation
``d(depth)/d(psi) = -(df/dpsi) / (grad_p f . r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_autodiff as ad
from .tensor_autodiff import Dual, Tensor

GRAZING_EPS = 1e-9
SECANT_ITERS = 8


@dataclass
class Camera:
    K: np.ndarray
    P: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.P = np.asarray(self.P, dtype=np.float64).reshape(4, 4)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0 or abs(self.K[1, 0]) + abs(self.K[2, 0]) + abs(self.K[2, 1]) > 0:
            raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        R = self.P[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValueError("extrinsic rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        R, t = self.P[:3, :3], self.P[:3, 3]
        return -R.T @ t

    def to_dict(self) -> dict:
        return {"K": self.K.reshape(-1).tolist(), "P": self.P.reshape(-1).tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.asarray(d["K"]).reshape(3, 3), np.asarray(d["P"]).reshape(4, 4),
                   int(d["width"]), int(d["height"]))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    Camera axes follow the OpenCV convention: +z forward, +x right, +y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    P = np.eye(4)
    P[:3, :3] = R
    P[:3, 3] = -R @ eye
    return P


def make_camera(eye, width: int, height: int, focal: float | None = None, target=(0.0, 0.0, 0.0)) -> Camera:
    f = float(width) if focal is None else focal
    K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K, look_at(eye, target), width, height)


def generate_rays(camera: Camera):
    """Origins and unit directions ``(H, W, 3)`` through pixel centers."""
    u, v = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    d_cam = pix @ np.linalg.inv(camera.K).T
    R = camera.P[:3, :3]
    d = d_cam @ R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def default_t_range(camera: Camera, margin: float = 1.8):
    dist = float(np.linalg.norm(camera.center))
    return max(dist - margin, 1e-6), dist + margin


@dataclass
class MarchResult:
    hit: np.ndarray
    depth: np.ndarray
    min_val: np.ndarray
    t_min: np.ndarray
    inside: np.ndarray


def march(field_np, origins, dirs, t_range, steps: int = 128, chunk: int = 65536) -> MarchResult:
    """Uniform march with secant refinement of the first + to - crossing.

    ``field_np`` maps an ``(M, 3)`` array to ``(M,)`` values. ``t_range`` is a
    pair of scalars or a pair of per-ray arrays.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    t_near = np.broadcast_to(np.asarray(t_range[0], dtype=np.float64), (n,))
    t_far = np.broadcast_to(np.asarray(t_range[1], dtype=np.float64), (n,))
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if np.any(t_near >= t_far):
        raise ValueError("t_range must satisfy t_near < t_far")
    frac = np.linspace(0.0, 1.0, steps)
    ts = t_near[:, None] + (t_far - t_near)[:, None] * frac[None, :]
    vals = np.empty((n, steps))
    rays_per = max(1, chunk // steps)
    for s in range(0, n, rays_per):
        pts = origins[s:s + rays_per, None, :] + ts[s:s + rays_per, :, None] * dirs[s:s + rays_per, None, :]
        vals[s:s + rays_per] = np.asarray(field_np(pts.reshape(-1, 3))).reshape(-1, steps)

    imin = np.argmin(vals, axis=1)
    rows = np.arange(n)
    min_val = vals[rows, imin]
    t_min = ts[rows, imin]

    inside = vals[:, 0] < 0
    cross = (vals[:, :-1] > 0) & (vals[:, 1:] <= 0)
    has = cross.any(axis=1)
    first = np.argmax(cross, axis=1)
    hit = has | inside
    depth = np.full(n, np.inf)
    depth[inside] = t_near[inside]

    sel = np.where(has & ~inside)[0]
    if len(sel):
        ta, tb = ts[sel, first[sel]], ts[sel, first[sel] + 1]
        fa, fb = vals[sel, first[sel]], vals[sel, first[sel] + 1]
        o, d = origins[sel], dirs[sel]
        for _ in range(SECANT_ITERS):
            denom = fa - fb
            tm = np.where(np.abs(denom) > 0, ta + fa * (tb - ta) / np.where(denom == 0, 1, denom), 0.5 * (ta + tb))
            fm = np.asarray(field_np(o + tm[:, None] * d))
            pos = fm > 0
            ta, fa = np.where(pos, tm, ta), np.where(pos, fm, fa)
            tb, fb = np.where(pos, tb, tm), np.where(pos, fb, fm)
            done = fm == 0
            ta, tb = np.where(done, tm, ta), np.where(done, tm, tb)
        # report the bracket end with smaller |f|
        depth[sel] = np.where(np.abs(fa) < np.abs(fb), ta, tb)
    return MarchResult(hit, depth, min_val, t_min, inside)


@dataclass
class RenderOptions:
    steps: int = 128
    t_range: tuple | None = None
    alpha: float = 50.0
    background: float = 0.5
    cull_radius: float | None = None


@dataclass
class RenderedImage:
    """Per-pixel outputs; tape tensors live in ``color_hit`` and ``soft_mask_t``."""

    height: int
    width: int
    hit: np.ndarray
    depth: np.ndarray
    grazing: np.ndarray
    inside: np.ndarray
    soft_mask_t: Tensor
    color_hit: Tensor | None
    background: float = 0.5
    stats: dict = field(default_factory=dict)

    @property
    def soft_mask(self) -> np.ndarray:
        return self.soft_mask_t.data.reshape(self.height, self.width)

    @property
    def color(self) -> np.ndarray:
        img = np.full((self.height * self.width, 3), self.background)
        if self.color_hit is not None:
            img[self.hit.reshape(-1)] = self.color_hit.data
        return img.reshape(self.height, self.width, 3)


def _field_numpy(geo):
    def f(p):
        with ad.no_grad():
            return geo(Dual(Tensor(p))).primal.data
    return f


def render_rays(geo, tex, origins, dirs, opts: RenderOptions, t_range):
    """Render flattened rays. ``geo`` maps Dual points to Dual values and ``tex``
    maps a Tensor of points to RGB (or is None for silhouette-only)."""
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    n = len(dirs)
    t_near, t_far = t_range
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n,)).copy()
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n,)).copy()
    fnp = _field_numpy(geo)

    # rays whose closest approach clears the cull sphere are not marched
    t_close = -np.einsum("ij,ij->i", origins, dirs)
    closest = origins + t_close[:, None] * dirs
    active = np.ones(n, dtype=bool)
    if opts.cull_radius is not None:
        active = np.linalg.norm(closest, axis=1) < opts.cull_radius
    hit = np.zeros(n, dtype=bool)
    depth = np.full(n, np.inf)
    inside = np.zeros(n, dtype=bool)
    x_min = closest.copy()
    if active.any():
        m = march(fnp, origins[active], dirs[active], (t_near[active], t_far[active]), opts.steps)
        hit[active], depth[active], inside[active] = m.hit, m.depth, m.inside
        x_min[active] = origins[active] + m.t_min[:, None] * dirs[active]

    # soft silhouette: value at each ray's minimum point, kept on the tape
    min_val = geo(Dual(Tensor(x_min))).primal
    soft = ad.sigmoid(min_val * (-opts.alpha))

    grazing = np.zeros(n, dtype=bool)
    color_hit = None
    idx = np.where(hit)[0]
    if len(idx):
        o, d = origins[idx], dirs[idx]
        x0 = o + depth[idx, None] * d
        with ad.no_grad():
            f0, g0 = ad.spatial_gradient(geo, x0)
        dn = np.einsum("ij,ij->i", g0.data, d)
        grazing[idx] = (np.abs(dn) < GRAZING_EPS) | inside[idx]
        ok = ~grazing[idx]
        f_t = geo(Dual(Tensor(x0))).primal
        # value equals depth; gradient is the implicit-function derivative
        safe = np.where(ok, dn, 1.0)
        d_t = Tensor(depth[idx]) - (f_t - Tensor(f0.data)) * Tensor(np.where(ok, 1.0 / safe, 0.0))
        x_t = Tensor(o) + ad.reshape(d_t, (-1, 1)) * Tensor(d)
        if tex is not None:
            color_hit = tex(x_t)
        depth_t = d_t
    else:
        depth_t = None
    return hit, depth, inside, grazing, soft, color_hit, depth_t


def render(geo, tex, camera: Camera, opts: RenderOptions | None = None) -> RenderedImage:
    opts = opts or RenderOptions()
    t_range = opts.t_range or default_t_range(camera)
    o, d = generate_rays(camera)
    hit, depth, inside, grazing, soft, color_hit, _ = render_rays(geo, tex, o, d, opts, t_range)
    return RenderedImage(camera.height, camera.width, hit, depth, grazing, inside, soft, color_hit,
                         opts.background, {"hit_pixels": int(hit.sum()), "grazing": int(grazing.sum())})


def intersect(geo, origin, direction, t_range, steps: int = 128):
    """Single-ray convenience: ``(hit, depth, min_val)``."""
    m = march(_field_numpy(geo), np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)), t_range, steps)
    return bool(m.hit[0]), float(m.depth[0]), float(m.min_val[0])


def surface_depth(geo, origins, dirs, t_range, steps: int = 128) -> Tensor:
    """Depths of hitting rays as a tape tensor (implicit gradient attached)."""
    opts = RenderOptions(steps=steps)
    hit, _, _, _, _, _, depth_t = render_rays(geo, None, np.asarray(origins), np.asarray(dirs), opts, t_range)
    if not hit.all():
        raise ValueError("surface_depth: some rays miss the surface")
    return depth_t


def shade_flat(shape_sdf, albedo, camera: Camera, steps: int = 128):
    """Non-differentiable render of a numpy-evaluable shape with ``albedo * max(0, n.v)``.

    ``shape_sdf`` maps a Dual of points to a Dual of values.
    """
    o, d = generate_rays(camera)
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    m = march(_field_numpy(shape_sdf), o, d, default_t_range(camera), steps)
    img = np.zeros((len(d), 3))
    idx = np.where(m.hit)[0]
    if len(idx):
        x = o[idx] + m.depth[idx, None] * d[idx]
        with ad.no_grad():
            _, g = ad.spatial_gradient(shape_sdf, x)
        n = g.data / np.maximum(np.linalg.norm(g.data, axis=1, keepdims=True), 1e-12)
        lam = np.clip(-np.einsum("ij,ij->i", n, d[idx]), 0.0, None)
        img[idx] = np.asarray(albedo)[None, :] * lam[:, None]
    H, W = camera.height, camera.width
    return img.reshape(H, W, 3), m.hit.reshape(H, W).astype(np.float64)


def projected_disc_mask(camera: Camera, center, radius: float, supersample: int = 1) -> np.ndarray:
    """Analytic silhouette of a sphere: pixel centers whose ray passes within ``radius``."""
    o, d = generate_rays(camera)
    oc = o - np.asarray(center, dtype=np.float64)
    t = -np.einsum("hwi,hwi->hw", oc, d)
    closest = oc + t[..., None] * d
    return (np.linalg.norm(closest, axis=-1) < radius) & (t > 0)


def hemisphere_cameras(n: int, radius: float = 3.0, width: int = 64, height: int = 64,
                       elev_range=(10.0, 80.0), seed: int = 0):
    """Cameras on the upper hemisphere with uniform azimuth and elevation, looking at the origin."""
    rng = np.random.default_rng(seed)
    az = rng.uniform(0.0, 2 * math.pi, n)
    el = np.radians(rng.uniform(elev_range[0], elev_range[1], n))
    cams = []
    for a, e in zip(az, el):
        eye = radius * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
        cams.append(make_camera(eye, width, height))
    return cams
