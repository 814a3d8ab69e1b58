"""Layered run configuration: defaults, then preset, then file, then flags."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .data import DEFAULT_COUNTS, ShapeFamilySpec
from .fields import FieldArch
from .losses import LossWeights
from .optimize import PretrainConfig, RunConfig, Schedule
from .render import RenderOptions

TASKS = ("sdf", "mvs", "pc")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "deterministic": False,
    "jobs": 1,
    "arch": asdict(FieldArch()),
    "mvs_pe_frequencies": 6,
    "weights": asdict(LossWeights()),
    "data": {"family": ShapeFamilySpec().to_dict(), "counts": dict(DEFAULT_COUNTS),
             "pretrain_task": "sdf", "test_views": 3},
    "pretrain": {"lr": 1e-3, "epochs": 1000, "decay_epochs": [], "decay_factor": 0.5,
                 "batch_size": 8, "samples_per_shape": 2048},
    "infer": {
        "sdf": {"lr": 1e-3, "epochs": 1000, "decay_epochs": []},
        "mvs": {"lr": 1e-4, "epochs": 3000, "decay_epochs": [1000, 1500, 2000]},
        "pc": {"lr": 5e-3, "epochs": 1500, "decay_epochs": []},
        "decay_factor": 0.5,
        "stage_split": [1, 2],
        "theta_lr_scale": 1.0,
        "patience": 200,
        "min_delta": 1e-5,
        "samples_per_iter": 4096,
        "alternating": False,
        "z_init_std": 0.01,
    },
    "render": asdict(RenderOptions()),
    "eval": {"mc_resolution": 128, "n_points": 10000, "tau": 0.02},
}

PRESETS = {
    "paper": {},
    "desk": {
        "arch": {"trunk_layers": 5, "hidden_width": 64, "skip_at": 2, "latent_dim": 64, "hyper_width": 64},
        "mvs_pe_frequencies": 0,
        "pretrain": {"epochs": 500, "decay_epochs": [167, 250, 333]},
        "infer": {
            "theta_lr_scale": 0.01,
            "sdf": {"epochs": 100},
            "mvs": {"epochs": 300, "decay_epochs": [100, 150, 200]},
            "pc": {"epochs": 150},
        },
        "render": {"steps": 64, "cull_radius": 1.25},
        "eval": {"mc_resolution": 64, "n_points": 5000},
    },
}
PRESETS["paper-lambda0.5"] = {"weights": {"lam": 0.5}}


def deep_merge(base: dict, over: dict, path: str = "", strict: bool = True) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if strict and k not in out:
            raise ConfigError(f"unknown config key {where}")
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v, where, strict)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_assignment(text: str) -> dict:
    """``a.b.c=value`` (value parsed as JSON when possible) to a nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def resolve(preset: str = "paper", file=None, overrides=()) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = deep_merge(DEFAULTS, PRESETS[preset])
    cfg["preset"] = preset
    if file is not None:
        path = Path(file)
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            cfg = deep_merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    for o in overrides:
        cfg = deep_merge(cfg, o if isinstance(o, dict) else parse_assignment(o))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    make_arch(cfg)
    make_weights(cfg)
    ShapeFamilySpec(**family_kwargs(cfg))
    for task in TASKS:
        make_run_config(cfg, task)
    make_pretrain_config(cfg)


# --------------------------------------------------------------- builders

def make_arch(cfg: dict, task: str | None = None) -> FieldArch:
    a = dict(cfg["arch"])
    if task == "mvs" and cfg["data"]["pretrain_task"] == "mvs":
        a["pe_frequencies"] = cfg["mvs_pe_frequencies"]
    return FieldArch(**a)


def make_weights(cfg: dict) -> LossWeights:
    return LossWeights(**cfg["weights"])


def make_render(cfg: dict) -> RenderOptions:
    return RenderOptions(**cfg["render"])


def family_kwargs(cfg: dict) -> dict:
    f = dict(cfg["data"]["family"])
    for k in ("kinds", "size_range", "aspect_range"):
        f[k] = tuple(f[k])
    return f


def make_run_config(cfg: dict, task: str, **kw) -> RunConfig:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    inf = cfg["infer"]
    t = inf[task]
    z_sched = Schedule(t["lr"], t["epochs"], tuple(t["decay_epochs"]), inf["decay_factor"])
    th_sched = Schedule(t["lr"] * inf["theta_lr_scale"], t["epochs"], tuple(t["decay_epochs"]), inf["decay_factor"])
    a, b = inf["stage_split"]
    s1 = t["epochs"] * a // (a + b)
    args = dict(task=task, weights=make_weights(cfg), z_schedule=z_sched, theta_schedule=th_sched,
                stage1_iters=s1, stage2_iters=t["epochs"] - s1, patience=inf["patience"],
                min_delta=inf["min_delta"], seed=cfg["seed"], deterministic=cfg["deterministic"],
                alternating=inf["alternating"], samples_per_iter=inf["samples_per_iter"],
                render=make_render(cfg), z_init_std=inf["z_init_std"])
    args.update(kw)
    return RunConfig(**args)


def make_pretrain_config(cfg: dict) -> PretrainConfig:
    p = cfg["pretrain"]
    return PretrainConfig(task=cfg["data"]["pretrain_task"], weights=make_weights(cfg),
                          schedule=Schedule(p["lr"], p["epochs"], tuple(p["decay_epochs"]), p["decay_factor"]),
                          batch_size=p["batch_size"], samples_per_shape=p["samples_per_shape"],
                          seed=cfg["seed"], render=make_render(cfg))
