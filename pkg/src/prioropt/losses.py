"""Energies, regularizers and composite objectives.

Every function takes tape tensors (or an :class:`ImplicitField` built from
them) and returns tape tensors, so gradients reach both the latent code and
the hypernetwork parameters. Energies are averaged per sample for
optimization; :class:`LossReport` keeps the summed form alongside.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import tensor_autodiff as ad
from .tensor_autodiff import Dual, Tensor
from .data import PointObservation, SdfObservation, ViewObservation
from .fields import FieldArch, ImplicitField, instantiate
from .render import RenderOptions, generate_rays, default_t_range, render_rays

BCE_EPS = 1e-6
TASKS = ("sdf", "mvs", "pc")


@dataclass
class LossWeights:
    lam: float = 0.1
    lam_c: float = 0.5
    lam_theta: float = 0.1
    lam_n: float = 1.0
    lam_g: float = 1.0
    lam_T: float = 1.0
    lam_Tg: float = 1.0
    lam_Tn: float = 2.0
    lam1: float = 0.5
    lam2: float = 2.0
    lam3: float = 1e-4
    lam4: float | None = None
    inv_sigma_sq: float = 1e-4
    k: int = 8
    n_surface: int = 512
    prior_norm: str = "squared"
    mvs_formulation: str = "main"

    def __post_init__(self):
        for name, val in asdict(self).items():
            if isinstance(val, (int, float)) and not isinstance(val, bool) and val < 0:
                raise ValueError(f"weight {name} must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.prior_norm not in ("squared", "unsquared"):
            raise ValueError("prior_norm must be 'squared' or 'unsquared'")

    @property
    def lam4_value(self) -> float:
        return self.lam * self.lam_theta if self.lam4 is None else self.lam4

    def replace(self, **kw) -> "LossWeights":
        return replace(self, **kw)


@dataclass
class LossReport:
    """``total == sum(weights[k] * components[k])``; ``sums`` hold the un-averaged energies."""

    total: float
    components: dict
    weights: dict
    sums: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"total": self.total, "components": dict(self.components), "weights": dict(self.weights),
                "sums": dict(self.sums), "flags": list(self.flags)}


class _Builder:
    """Accumulates weighted tape terms and their report entries."""

    def __init__(self):
        self.terms: list[tuple[str, float, Tensor]] = []
        self.sums: dict = {}
        self.flags: list = []

    def add(self, name: str, weight: float, value: Tensor, total_sum: float | None = None):
        self.terms.append((name, float(weight), value))
        if total_sum is not None:
            self.sums[name] = float(total_sum)

    def finish(self) -> tuple[Tensor, LossReport]:
        total = None
        for _, w, v in self.terms:
            if w == 0.0:
                continue
            total = v * w if total is None else total + v * w
        if total is None:
            total = Tensor(0.0)
        comps = {n: float(v.data) for n, _, v in self.terms}
        weights = {n: w for n, w, _ in self.terms}
        return total, LossReport(float(total.data), comps, weights, self.sums, self.flags)


# ----------------------------------------------------------------- energies

def energy_sdf(field: ImplicitField, points, sdf, reduction: str = "mean") -> Tensor:
    """L1 between predicted and target signed distances."""
    sdf = np.asarray(sdf, dtype=np.float64)
    if sdf.size == 0:
        raise ValueError("energy_sdf: empty sample set")
    pred = field.geo(Dual(Tensor(points))).primal
    total = ad.tsum(ad.tabs(pred - Tensor(sdf)))
    return total * (1.0 / sdf.size) if reduction == "mean" else total


def bce(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Elementwise binary cross entropy with predictions clamped to [eps, 1-eps]."""
    p = ad.clamp(pred, eps, 1.0 - eps)
    t = Tensor(np.asarray(target, dtype=np.float64))
    return -(t * ad.log(p) + (1.0 - t) * ad.log(1.0 - p))


def image_terms(color_hit: Tensor | None, hit: np.ndarray, soft_mask: Tensor, image, mask):
    """Per-view RGB L1 over the mask intersection and BCE over all pixels.

    Returns ``(rgb_sum, n_rgb, bce_sum, n_pix)`` with tape tensors for the sums.
    """
    image = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    hit = np.asarray(hit, dtype=bool).reshape(-1)
    bce_sum = ad.tsum(bce(soft_mask, mask))
    inter = (mask > 0.5) & hit
    if color_hit is None or not inter.any():
        return Tensor(0.0), 0, bce_sum, mask.size
    sel = inter[hit]
    diff = color_hit[np.where(sel)[0]] - Tensor(image[inter])
    return ad.tsum(ad.tabs(diff)), int(inter.sum()), bce_sum, mask.size


@dataclass
class ViewRender:
    hit: np.ndarray
    soft_mask: Tensor
    color_hit: Tensor | None
    surface_points: np.ndarray


def render_view(field: ImplicitField, view, opts: RenderOptions) -> ViewRender:
    cam = view.camera
    o, d = generate_rays(cam)
    hit, depth, _, _, soft, color_hit, _ = render_rays(field.geo, field.tex, o, d, opts,
                                                      opts.t_range or default_t_range(cam))
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    surf = o[hit] + depth[hit, None] * d[hit]
    return ViewRender(hit, soft, color_hit, surf)


def energy_mvs(field: ImplicitField, obs: ViewObservation, weights: LossWeights,
               opts: RenderOptions, renders=None):
    """Photometric + silhouette energy. Returns (rgb_mean, bce_mean, sums, flags, renders)."""
    for v in obs.views:
        if v.image is None or v.mask is None or v.camera is None:
            raise ValueError("energy_mvs: every view needs image, mask and camera")
    renders = renders or [render_view(field, v, opts) for v in obs.views]
    rgb_sum, n_rgb, bce_sum, n_pix = Tensor(0.0), 0, Tensor(0.0), 0
    for view, r in zip(obs.views, renders):
        rs, nr, bs, npx = image_terms(r.color_hit, r.hit, r.soft_mask, view.image, view.mask)
        rgb_sum, bce_sum = rgb_sum + rs, bce_sum + bs
        n_rgb += nr
        n_pix += npx
    flags = []
    if n_rgb == 0:
        flags.append("empty_mask_intersection")
    rgb_mean = rgb_sum * (1.0 / max(n_rgb, 1))
    bce_mean = bce_sum * (1.0 / n_pix)
    return rgb_mean, bce_mean, {"rgb": float(rgb_sum.data), "mask": float(bce_sum.data)}, flags, renders


def energy_pc(field: ImplicitField, points, normals=None, lam_n: float = 1.0, reduction: str = "mean"):
    """``|f(p)| + lam_n * ||grad f(p) - n||``; returns (distance term, normal term or None)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("energy_pc: empty point set")
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64)
        if normals.shape != points.shape or not np.all(np.isfinite(normals)):
            raise ValueError("energy_pc: normals must be given for all points or none")
        val, grad = ad.spatial_gradient(field.geo, points)
        nterm = ad.tsum(ad.l2_norm(grad - Tensor(normals), axis=-1))
    else:
        val = field.geo(Dual(Tensor(points))).primal
        nterm = None
    dterm = ad.tsum(ad.tabs(val))
    scale = 1.0 / len(points) if reduction == "mean" else 1.0
    return dterm * scale, (None if nterm is None else nterm * (lam_n * scale))


def eikonal(field: ImplicitField, probes) -> Tensor:
    """Mean of ``(||grad_p f|| - 1)^2`` over probe points."""
    _, grad = ad.spatial_gradient(field.geo, probes)
    r = ad.l2_norm(grad, axis=-1) - 1.0
    return ad.mean(r * r)


def eikonal_probes(points, rng: np.random.Generator) -> np.ndarray:
    """Input points plus an equal number of uniform samples in [-1, 1]^3."""
    points = np.asarray(points).reshape(-1, 3)
    return np.concatenate([points, rng.uniform(-1.0, 1.0, size=points.shape)])


def normal_smoothness(field: ImplicitField, surface_points, k: int = 8) -> Tensor:
    """Mean squared deviation of each unit normal from its k-neighbor average."""
    surface_points = np.asarray(surface_points, dtype=np.float64)
    if len(surface_points) < k + 1:
        raise ValueError(f"need at least {k + 1} surface samples, got {len(surface_points)}")
    _, grad = ad.spatial_gradient(field.geo, surface_points)
    n = grad / (ad.l2_norm(grad, axis=-1, keepdims=True) + 1e-12)
    _, nbr = cKDTree(surface_points).query(surface_points, k=k + 1)
    nbr = nbr[:, 1:]
    avg = ad.mean(ad.reshape(ad.index_select(n, nbr.reshape(-1), axis=0), (len(surface_points), k, 3)), axis=1)
    res = n - avg
    return ad.mean(ad.tsum(res * res, axis=-1))


# ------------------------------------------------------------- regularizers

def _norm(x: Tensor, mode: str) -> Tensor:
    sq = ad.tsum(x * x)
    return sq if mode == "squared" else ad.sqrt(sq)


def code_prior(z: Tensor, mode: str = "squared") -> Tensor:
    return _norm(ad.as_tensor(z), mode)


def prior_consistency(theta, theta0) -> Tensor:
    """``||theta - theta0||^2``."""
    theta = ad.as_tensor(theta)
    theta0 = np.asarray(theta0.data if isinstance(theta0, Tensor) else theta0)
    if theta.shape != theta0.shape:
        raise ValueError(f"prior_consistency: lengths {theta.shape} and {theta0.shape} differ")
    d = theta - Tensor(theta0)
    return ad.tsum(d * d)


def _theta_term(theta, theta0, mode: str) -> Tensor:
    if theta0 is None:
        raise ValueError("theta0 is not set; the prior has not been frozen")
    sq = prior_consistency(theta, theta0)
    return sq if mode == "squared" else ad.sqrt(sq)


def reg_code_prior(theta, z, theta0, weights: LossWeights) -> Tensor:
    """``inv_sigma_sq * ||z|| + lam_theta * ||theta - theta0||``."""
    return (code_prior(z, weights.prior_norm) * weights.inv_sigma_sq
            + _theta_term(theta, theta0, weights.prior_norm) * weights.lam_theta)


def reg_pc(field: ImplicitField, theta, z, theta0, probes, weights: LossWeights) -> Tensor:
    if len(probes) == 0:
        raise ValueError("reg_pc: no probe points")
    return reg_code_prior(theta, z, theta0, weights) + eikonal(field, probes) * weights.lam_g


# --------------------------------------------------------------- composites

def loss_training_mvs(field: ImplicitField, z, obs: ViewObservation, weights: LossWeights,
                      opts: RenderOptions, rng: np.random.Generator | None = None, renders=None):
    """``L_RGB + lam1 L_Mask + lam2 L_Normal + lam3 ||z||^2``."""
    b = _Builder()
    rgb, mask, sums, flags, renders = energy_mvs(field, obs, weights, opts, renders)
    b.flags += flags
    b.add("rgb", 1.0, rgb, sums["rgb"])
    b.add("mask", weights.lam1, mask, sums["mask"])
    _add_normal_term(b, field, renders, weights, weights.lam2, rng)
    b.add("gaussian", weights.lam3, code_prior(z, "squared"))
    return b.finish()


def _add_normal_term(b: _Builder, field, renders, weights, weight, rng):
    surf = np.concatenate([r.surface_points for r in renders]) if renders else np.zeros((0, 3))
    if len(surf) < weights.k + 1:
        warnings.warn("too few surface samples for the normal smoothness term; skipped")
        b.flags.append("normal_term_skipped")
        return
    if len(surf) > weights.n_surface:
        rng = rng or np.random.default_rng(0)
        surf = surf[np.sort(rng.choice(len(surf), weights.n_surface, replace=False))]
    b.add("normal", weight, normal_smoothness(field, surf, weights.k))


def _check_task(task):
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def loss_inference(task: str, obs, arch: FieldArch, theta, z, theta0, weights: LossWeights,
                   opts: RenderOptions | None = None, rng: np.random.Generator | None = None,
                   use_theta_term: bool = True):
    """Task energy plus ``lam`` times the task regularizer. Returns (total tensor, report).

    ``use_theta_term=False`` removes the prior-consistency component entirely
    (random-initialization runs have no reference prior).
    """
    _check_task(task)
    rng = rng or np.random.default_rng(0)
    theta, z = ad.as_tensor(theta), ad.as_tensor(z)
    field = instantiate(arch, theta, z)
    b = _Builder()
    lam = weights.lam
    if task == "mvs" and weights.mvs_formulation == "fragment":
        total, rep = loss_training_mvs(field, z, obs, weights, opts or RenderOptions(), rng)
        b.terms.append(("training", 1.0, total))
        b.sums.update(rep.sums)
        b.flags += rep.flags
        if use_theta_term:
            b.add("prior", weights.lam4_value, _theta_term(theta, theta0, "squared"))
        return b.finish()

    if task == "sdf":
        b.add("energy", 1.0, energy_sdf(field, obs.points, obs.sdf),
              float(np.sum(np.abs(field_values(field, obs.points) - obs.sdf))))
    elif task == "mvs":
        rgb, mask, sums, flags, _ = energy_mvs(field, obs, weights, opts or RenderOptions())
        b.flags += flags
        b.add("rgb", 1.0, rgb, sums["rgb"])
        b.add("mask", weights.lam_c, mask, sums["mask"])
    else:
        d, n = energy_pc(field, obs.points, obs.normals, weights.lam_n)
        b.add("distance", 1.0, d)
        if n is not None:
            b.add("normal", 1.0, n)
    b.add("code", lam * weights.inv_sigma_sq, code_prior(z, weights.prior_norm))
    if use_theta_term:
        b.add("theta", lam * weights.lam_theta, _theta_term(theta, theta0, weights.prior_norm))
    if task == "pc":
        b.add("eikonal", lam * weights.lam_g, eikonal(field, eikonal_probes(obs.points, rng)))
    return b.finish()


def field_values(field: ImplicitField, points) -> np.ndarray:
    with ad.no_grad():
        return field.geo(Dual(Tensor(points))).primal.data


def loss_pretrain(task: str, batch: list, arch: FieldArch, theta, codes, weights: LossWeights,
                  opts: RenderOptions | None = None, rng: np.random.Generator | None = None):
    """Sum over shapes of energy plus ``lam_T`` times the pre-training regularizer.

    ``codes`` is a ``(B, d_z)`` tensor aligned with ``batch``. There is never a
    prior-consistency term here.
    """
    _check_task(task)
    rng = rng or np.random.default_rng(0)
    theta, codes = ad.as_tensor(theta), ad.as_tensor(codes)
    B = len(batch)
    if codes.shape[0] != B:
        raise ValueError("one latent code per batch element is required")
    b = _Builder()
    code_term = None
    for j in range(B):
        c = code_prior(codes[j], weights.prior_norm)
        code_term = c if code_term is None else code_term + c
    lamT = weights.lam_T

    if task in ("sdf", "pc"):
        field = ImplicitField(arch, hyper_batch(arch, theta, codes))
        pts = np.stack([o.points for o in batch])
        if task == "sdf":
            target = np.stack([o.sdf for o in batch])
            pred = field.geo(Dual(Tensor(pts))).primal
            err = ad.tsum(ad.mean(ad.tabs(pred - Tensor(target)), axis=1))
            b.add("energy", 1.0, err, float(np.sum(np.abs(pred.data - target))))
        else:
            normals = batch[0].normals
            if normals is not None:
                nrm = np.stack([o.normals for o in batch])
                val, grad = ad.spatial_gradient(field.geo, pts)
                nterm = ad.tsum(ad.mean(ad.l2_norm(grad - Tensor(nrm), axis=-1), axis=1))
                b.add("normal", weights.lam_n, nterm)
            else:
                val = field.geo(Dual(Tensor(pts))).primal
            b.add("distance", 1.0, ad.tsum(ad.mean(ad.tabs(val), axis=1)))
            probes = np.stack([eikonal_probes(o.points, rng) for o in batch])
            _, grad = ad.spatial_gradient(field.geo, probes)
            r = ad.l2_norm(grad, axis=-1) - 1.0
            b.add("eikonal", lamT * weights.lam_Tg, ad.tsum(ad.mean(r * r, axis=1)))
    else:
        opts = opts or RenderOptions()
        rgb_t = mask_t = normal_t = None
        for j, obs in enumerate(batch):
            field = instantiate(arch, theta, codes[j])
            rgb, mask, _, flags, renders = energy_mvs(field, obs, weights, opts)
            b.flags += flags
            rgb_t = rgb if rgb_t is None else rgb_t + rgb
            mask_t = mask if mask_t is None else mask_t + mask
            sub = _Builder()
            _add_normal_term(sub, field, renders, weights, 1.0, rng)
            b.flags += sub.flags
            for _, _, v in sub.terms:
                normal_t = v if normal_t is None else normal_t + v
        b.add("rgb", 1.0, rgb_t)
        b.add("mask", weights.lam_c, mask_t)
        if normal_t is not None:
            b.add("normal", lamT * weights.lam_Tn, normal_t)
    b.add("code", lamT * weights.inv_sigma_sq, code_term)
    return b.finish()


def hyper_batch(arch: FieldArch, theta, codes) -> Tensor:
    from .fields import hyper_forward
    return hyper_forward(arch, theta, codes)
