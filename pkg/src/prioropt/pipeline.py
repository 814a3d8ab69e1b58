"""End-to-end helpers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import math

import numpy as np

from . import geometry as geo
from .fields import FieldArch, HyperPrior, eval_geo
from .geometry import MetricReport, TriMesh


def extract_mesh(arch: FieldArch, theta, z, resolution: int = 128) -> TriMesh:
    prior = HyperPrior(arch, np.asarray(theta))
    return geo.marching_cubes(lambda q: eval_geo(prior, z, q), resolution)


def failed_report(tau: float) -> MetricReport:
    """Metrics for a reconstruction with no surface at all."""
    return MetricReport(math.inf, 0.0, 0.0, tau, 0)


def score(arch: FieldArch, theta, z, gt, resolution: int = 64, n_points: int = 5000, tau: float = 0.02,
          seed: int = 0):
    """Extract the zero level set and compare it against ``gt``. Returns (mesh, report)."""
    mesh = extract_mesh(arch, theta, z, resolution)
    if mesh.empty:
        return mesh, failed_report(tau)
    return mesh, geo.evaluate(mesh, gt, n_points, tau, seed)


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


ARMS = ("full", "z-only", "random-init", "no-l2")


def run_arm(arm: str, obs, prior: HyperPrior, config, log=None):
    """One ablation arm on one observation, built from the schedules in ``config``.

    z-only drops stage 2. no-l2 zeroes the consistency weight. random-init
    starts from fresh parameters, spends both stage budgets jointly and steps
    theta at the code learning rate.
    """
    from .optimize import infer, infer_random_init

    if arm == "full":
        return infer(obs, prior, config, log=log)
    if arm == "z-only":
        return infer(obs, prior, config.replace(stage2_iters=0), log=log)
    if arm == "no-l2":
        return infer(obs, prior, config.replace(weights=config.weights.replace(lam_theta=0.0)), log=log)
    if arm == "random-init":
        return infer_random_init(obs, prior.arch, config.replace(theta_schedule=config.z_schedule), log=log)
    raise ValueError(f"unknown ablation arm {arm!r}; expected one of {ARMS}")
