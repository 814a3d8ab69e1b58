"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale criteria (3 to 6) train real priors and take roughly forty
minutes together on one core.
"""

import json
import time

import numpy as np
import pytest

from prioropt import tensor_autodiff as ad
from prioropt import config as C
from prioropt import data as D
from prioropt import fields as fl
from prioropt import geometry as geo
from prioropt import losses as L
from prioropt import pipeline as P
from prioropt import render as rd
from prioropt.tensor_autodiff import Tape, Tensor
from prioropt.cli import main as cli_main
from prioropt.optimize import infer, pretrain
from test_losses import SMALL, check_grads, tiny_views
from test_render import radius_sphere, unit_sphere

pytestmark = pytest.mark.slow

GAP_FAMILY = {"n_shapes": 20, "train_fraction": 0.75, "test_fraction": 0.25, "gap": 0.2, "seed": 1}


def desk(overrides=()):
    return C.resolve("desk", overrides=list(overrides))


def sdf_dataset(records, cfg, base_seed):
    n = cfg["data"]["counts"]["sdf"]
    return [(r.id, D.bake_observations(r.shape, "sdf", {"sdf": n}, seed=base_seed + i)) for i, r in enumerate(records)]


@pytest.fixture(scope="module")
def gap_setup():
    """sdf-pretrained prior over a family whose test sizes lie outside the train range."""
    cfg = desk([{"data": {"family": GAP_FAMILY}}])
    fam = D.generate_family(D.ShapeFamilySpec(**C.family_kwargs(cfg)))
    arch = C.make_arch(cfg)
    prior = pretrain(sdf_dataset(fam["train"], cfg, 0), arch, C.make_pretrain_config(cfg))
    return cfg, fam, prior


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    base = fl.HyperPrior.initialize(SMALL, seed=2)
    base.freeze()
    theta = base.theta + rng.normal(0, 1e-2, base.theta.size)
    t0_ = base.theta0
    w = L.LossWeights(k=3, n_surface=20, lam3=0.5)
    opts = rd.RenderOptions(steps=48, alpha=20.0)
    views = tiny_views()
    sdf_p = rng.uniform(-0.8, 0.8, (40, 3))
    sdf_v = np.linalg.norm(sdf_p, axis=1) - 0.5
    pc_p = rng.uniform(-0.7, 0.7, (15, 3))
    pc_n = pc_p / np.linalg.norm(pc_p, axis=1, keepdims=True)
    probes = L.eikonal_probes(pc_p[:10], rng)

    def inst(th, z):
        return fl.instantiate(SMALL, th, z)

    def e_mvs(th, z):
        rgb, mask, *_ = L.energy_mvs(inst(th, z), views, w, opts)
        return rgb + mask * w.lam_c

    def e_pc(th, z):
        d, n = L.energy_pc(inst(th, z), pc_p, pc_n, lam_n=0.7)
        return d + n

    suite = {
        "energy_sdf": (lambda th, z: L.energy_sdf(inst(th, z), sdf_p, sdf_v), 1e-3),
        "energy_mvs": (e_mvs, 1e-3),
        "energy_pc": (e_pc, 1e-3),
        "reg_code_prior": (lambda th, z: L.reg_code_prior(th, z, t0_, L.LossWeights(inv_sigma_sq=0.5)), 1e-3),
        "reg_pc": (lambda th, z: L.reg_pc(inst(th, z), th, z, t0_, probes, L.LossWeights()), 1e-3),
        "loss_training_mvs": (lambda th, z: L.loss_training_mvs(inst(th, z), z, views, w, opts,
                                                                np.random.default_rng(0))[0], 1e-3),
    }
    worst, failed = {}, []
    for name, (fn, tol) in suite.items():
        z0 = rng.normal(size=3) * 0.1
        try:
            worst[name] = max(check_grads(fn, theta, z0, tol))
        except AssertionError:
            failed.append(name)
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 120
    verdict(1, ok, f"max rel err {max(worst.values(), default=float('nan')):.2e}, failed={failed}, "
                   f"{elapsed:.0f}s")


# ---------------------------------------------------------------- 2

def test_criterion_2_renderer(verdict):
    t0 = time.perf_counter()
    cam = rd.make_camera([0, 0, 3.0], 64, 64)
    pred = rd.render(unit_sphere, None, cam).soft_mask > 0.5
    gt = rd.projected_disc_mask(cam, np.zeros(3), 1.0)
    iou = (pred & gt).sum() / (pred | gt).sum()

    hit, depth, _ = rd.intersect(unit_sphere, [0, 0, 3.0], [0, 0, -1.0], (1.2, 4.8))
    depth_err = abs(depth - 2.0) if hit else np.inf

    origins = np.tile([0.2, 0.1, 3.0], (5, 1))
    dirs = np.array([[0.0, 0.0, -1.0], [0.05, 0.0, -1], [0, 0.08, -1], [-0.1, -0.05, -1], [0.1, 0.1, -1]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    center = np.array([0.1, -0.05, 0.0])
    wts = np.random.default_rng(0).normal(size=5)
    with Tape():
        rho = Tensor(0.9, requires_grad=True)
        d = rd.surface_depth(radius_sphere(rho, center), origins, dirs, (1.2, 4.8))
        (g,) = ad.backward(ad.tsum(d * Tensor(wts)), [rho])
    h = 1e-5
    fd = (rd.surface_depth(radius_sphere(0.9 + h, center), origins, dirs, (1.2, 4.8)).data @ wts
          - rd.surface_depth(radius_sphere(0.9 - h, center), origins, dirs, (1.2, 4.8)).data @ wts) / (2 * h)
    grad_err = abs(float(g) - fd) / abs(fd)
    elapsed = time.perf_counter() - t0
    ok = iou >= 0.98 and depth_err < 1e-6 and grad_err < 1e-3 and elapsed < 30
    verdict(2, ok, f"IoU {iou:.4f}, axial depth err {depth_err:.1e}, depth grad rel err {grad_err:.1e}, "
                   f"{elapsed:.1f}s")


# ---------------------------------------------------------------- 3

def test_criterion_3_auto_encoding(verdict):
    t0 = time.perf_counter()
    cfg = desk()
    fam = D.generate_family(D.ShapeFamilySpec(**C.family_kwargs(cfg)))
    assert len(fam["train"]) == 8
    prior = pretrain(sdf_dataset(fam["train"], cfg, 0), C.make_arch(cfg), C.make_pretrain_config(cfg))
    rec = fam["train"][0]
    obs = D.bake_observations(rec.shape, "sdf", {"sdf": cfg["data"]["counts"]["sdf"]}, seed=999)
    res = infer(obs, prior, C.make_run_config(cfg, "sdf"))
    ev = cfg["eval"]
    _, rep = P.score(prior.arch, res.theta, res.z, rec.shape, ev["mc_resolution"], ev["n_points"], ev["tau"])
    elapsed = time.perf_counter() - t0
    verdict(3, rep.chamfer_mean < 1e-3 and elapsed < 600,
            f"Chamfer {rep.chamfer_mean:.2e} on {rec.id}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 4

def test_criterion_4_unseen_ordering(gap_setup, verdict):
    t0 = time.perf_counter()
    cfg, fam, prior = gap_setup
    ev = cfg["eval"]
    chamfers = {"full": [], "z-only": [], "random-init": []}
    assert len(fam["test"]) == 5
    for i, rec in enumerate(fam["test"]):
        for seed in range(5):
            obs = D.bake_observations(rec.shape, "pc", {"points": 300}, seed=100 + 10 * i + seed)
            run = C.make_run_config(cfg, "pc", seed=seed)
            for arm in chamfers:
                res = P.run_arm(arm, obs, prior, run)
                _, rep = P.score(prior.arch, res.theta, res.z, rec.shape, ev["mc_resolution"], ev["n_points"],
                                 ev["tau"], seed)
                chamfers[arm].append(rep.chamfer_mean)
    med = {k: P.median(v) for k, v in chamfers.items()}
    elapsed = time.perf_counter() - t0
    ok = med["full"] < med["z-only"] and med["full"] < med["random-init"] and elapsed < 45 * 60
    verdict(4, ok, "median Chamfer x1e3 " + ", ".join(f"{k} {1e3 * v:.3f}" for k, v in med.items())
            + f", {elapsed / 60:.1f} min")


# ---------------------------------------------------------------- 5

def test_criterion_5_l2_guard(gap_setup, verdict):
    cfg, fam, prior = gap_setup
    ev = cfg["eval"]
    rec = fam["test"][0]
    wins, pairs = 0, []
    for seed in range(5):
        obs = D.bake_view_set(rec.shape, 2, 32, seed=200 + seed)
        run = C.make_run_config(cfg, "mvs", seed=seed)
        ch = {}
        for lam_theta in (0.1, 0.0):
            res = infer(obs, prior, run.replace(weights=run.weights.replace(lam_theta=lam_theta)))
            ch[lam_theta] = P.score(prior.arch, res.theta, res.z, rec.shape, ev["mc_resolution"], ev["n_points"],
                                    ev["tau"], seed)[1].chamfer_mean
        wins += ch[0.1] <= ch[0.0]
        pairs.append(f"{1e3 * ch[0.1]:.3f}/{1e3 * ch[0.0]:.3f}")
    obs = D.bake_view_set(rec.shape, 2, 32, seed=200)
    run = C.make_run_config(cfg, "mvs", seed=0)
    pinned = infer(obs, prior, run.replace(weights=run.weights.replace(lam_theta=1e9)))
    drift = np.linalg.norm(pinned.theta - prior.theta0) / np.linalg.norm(prior.theta0)
    verdict(5, wins >= 4 and drift < 1e-4,
            f"lambda_theta 0.1 <= 0 on {wins}/5 seeds (x1e3: {', '.join(pairs)}); pinned drift {drift:.1e}")


# ---------------------------------------------------------------- 6

def test_criterion_6_eikonal(gap_setup, verdict):
    cfg, _, prior = gap_setup
    shape = geo.sphere(0.55)
    obs = D.bake_observations(shape, "pc", {"points": 300}, seed=7)
    res = infer(obs, prior, C.make_run_config(cfg, "pc"))
    field = fl.instantiate(prior.arch, res.theta, res.z)
    probes = np.random.default_rng(8).uniform(-1, 1, (1000, 3))
    _, g = ad.spatial_gradient(field.geo, probes)
    eik = float(np.mean(np.abs(np.linalg.norm(g.data, axis=1) - 1.0)))
    ev = cfg["eval"]
    _, rep = P.score(prior.arch, res.theta, res.z, shape, ev["mc_resolution"], ev["n_points"], ev["tau"])
    verdict(6, eik < 0.1 and rep.normal_consistency >= 0.95,
            f"mean |grad|-1| {eik:.4f}, normal consistency {rep.normal_consistency:.4f}")


# ---------------------------------------------------------------- 7

def test_criterion_7_metric_oracles(verdict):
    rng = np.random.default_rng(5)
    checks = {}
    a1, b1 = np.zeros((1, 3)), np.array([[1.0, 0, 0]])
    pts = rng.normal(size=(50, 3))
    checks["chamfer unit pair"] = geo.chamfer(a1, b1) == 1.0
    checks["fscore tau"] = geo.fscore(a1, b1, 0.5) == 0.0 and geo.fscore(a1, b1, 2.0) == 100.0
    checks["identity"] = geo.chamfer(pts, pts) == 0.0 and geo.fscore(pts, pts) == 100.0
    n = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    checks["nc self/flip"] = (abs(geo.normal_consistency(pts, n, pts, n) - 1) < 1e-12
                              and abs(geo.normal_consistency(pts, n, pts, -n) - 1) < 1e-12)
    ez, ex = np.tile([0, 0, 1.0], (50, 1)), np.tile([1.0, 0, 0], (50, 1))
    checks["nc orthogonal"] = geo.normal_consistency(pts, ez, pts, ex) == 0.0
    a, b = rng.uniform(-1, 1, (2000, 3)), rng.uniform(-1, 1, (2000, 3))
    na = rng.normal(size=(2000, 3))
    na /= np.linalg.norm(na, axis=1, keepdims=True)
    nb = rng.normal(size=(2000, 3))
    nb /= np.linalg.norm(nb, axis=1, keepdims=True)
    checks["brute == tree"] = (
        abs(geo.chamfer(a, b, "brute") - geo.chamfer(a, b, "tree")) < 1e-12
        and abs(geo.fscore(a, b, 0.05, "brute") - geo.fscore(a, b, 0.05, "tree")) < 1e-12
        and abs(geo.normal_consistency(a, na, b, nb, "brute") - geo.normal_consistency(a, na, b, nb, "tree")) < 1e-12)
    bad = [k for k, v in checks.items() if not v]
    verdict(7, not bad, f"{len(checks) - len(bad)}/{len(checks)} oracle checks, failing={bad}")


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism(tmp_path, verdict):
    from test_cli import TINY
    cfgf = tmp_path / "cfg.json"
    cfgf.write_text(json.dumps(TINY))
    common = ["--preset", "desk", "--config", str(cfgf), "--seed", "4", "--deterministic"]
    assert cli_main(["gen-data", *common, "--out", str(tmp_path / "data")]) == 0
    assert cli_main(["pretrain", *common, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "prior")]) == 0
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main(["recon-sdf", *common, "--data", str(tmp_path / "data"),
                         "--prior", str(tmp_path / "prior" / "prior"), "--out", str(out)]) == 0
        blobs.append((out / "metrics.json").read_bytes())
    verdict(8, blobs[0] == blobs[1], f"metric JSON identical across runs ({len(blobs[0])} bytes)")


# ---------------------------------------------------------------- 9

def test_criterion_9_marching_cubes(verdict):
    res = 64
    mesh = geo.marching_cubes(geo.sphere(), res)
    cell = 2 * geo.GRID_BOUND / (res - 1)
    dev = float(np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 1.0)))
    chi = mesh.euler_characteristic()
    verdict(9, dev < 1.5 * cell and chi == 2, f"max radius deviation {dev:.4f} (limit {1.5 * cell:.4f}), "
                                              f"Euler characteristic {chi}")
