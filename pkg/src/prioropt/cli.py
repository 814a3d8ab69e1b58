"""``prioropt`` command line: data generation, pre-training, reconstruction, evaluation, ablation."""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import config as C
from . import data as D
from . import geometry as geo
from . import io
from . import pipeline as P
from . import report
from .fields import HyperPrior, load_checkpoint, save_checkpoint
from .optimize import infer, pretrain

TASK_OF = {"recon-sdf": "sdf", "recon-mv": "mvs", "recon-pc": "pc"}
OBS_SUFFIX = {"sdf": "_sdf.ply", "pc": "_points.ply", "mvs": "_cameras.json"}


class CliError(Exception):
    def __init__(self, code: str, message: str, path=None):
        super().__init__(message)
        self.code, self.message, self.path = code, message, path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def thread_cap() -> int:
    raw = os.environ.get("PRIOROPT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError("config", f"PRIOROPT_THREADS must be an integer, got {raw!r}")


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config layered over the preset")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--preset", choices=sorted(C.PRESETS), default="paper")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON")

    parser = _Parser(prog="prioropt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="generate a shape family and bake observations")
    p = sub.add_parser("pretrain", parents=[common], help="pre-train the hypernetwork prior")
    p.add_argument("--data", type=Path, required=True)
    for name in TASK_OF:
        p = sub.add_parser(name, parents=[common], help=f"test-time reconstruction ({TASK_OF[name]})")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--prior", type=Path, required=True)
        p.add_argument("--shapes", nargs="*", help="shape ids (default: every test shape)")
        p.add_argument("--persist", action="store_true", help="keep the updated prior in the result checkpoint")
    p = sub.add_parser("extract-mesh", parents=[common], help="mesh a checkpoint and code")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--code", required=True, help="codebook id in the checkpoint")
    p.add_argument("--resolution", type=int)
    p = sub.add_parser("eval", parents=[common], help="metrics between two meshes or oriented point sets")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p = sub.add_parser("ablate", parents=[common], help="full / z-only / random-init / no-l2 comparison")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--prior", type=Path, required=True)
    p.add_argument("--task", choices=["sdf", "mvs", "pc"], default="pc")
    p.add_argument("--shapes", nargs="*")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at the config seed")
    return parser


def resolved_config(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    if args.jobs is not None:
        overrides.append({"jobs": args.jobs})
    if args.deterministic:
        overrides.append({"deterministic": True})
    try:
        return C.resolve(args.preset, args.config, overrides)
    except FileNotFoundError as e:
        raise CliError("missing-file", "config file not found", e.filename or args.config)
    except (C.ConfigError, TypeError, ValueError) as e:
        raise CliError("config", str(e), args.config)


def write_run_meta(out: Path, cfg: dict, argv: list) -> None:
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.json", cfg)
    io.write_json(out / "run.json", {"version": version_string(), "seed": cfg["seed"], "argv": argv,
                                     "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")})


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise CliError("missing-file", f"{what} not found", path)
    return Path(path)


def _load_prior(path: Path) -> HyperPrior:
    path = _require(path if path.suffix == ".json" else path.with_suffix(".json"), "prior checkpoint")
    prior = load_checkpoint(path)
    if prior.theta0 is None:
        raise CliError("prior", "checkpoint has no frozen theta0", path)
    return prior


def _family(data_dir: Path):
    return D.read_family(_require(Path(data_dir) / "family.json", "family manifest"))


def _observation(data_dir: Path, split: str, shape_id: str, task: str):
    return D.read_observation(_require(Path(data_dir) / split / shape_id / f"{shape_id}{OBS_SUFFIX[task]}",
                                       f"{task} observation"))


def _select(family: dict, ids) -> list:
    recs = {r.id: r for s in ("train", "test") for r in family[s]}
    if not ids:
        return list(family["test"])
    missing = [i for i in ids if i not in recs]
    if missing:
        raise CliError("unknown-shape", f"no shape with id {missing[0]!r}")
    return [recs[i] for i in ids]


# --------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    spec = D.ShapeFamilySpec(**C.family_kwargs(cfg))
    fam = D.generate_family(spec)
    out = args.out
    D.write_family(out / "family.json", spec, fam)
    counts = dict(cfg["data"]["counts"])
    base = cfg["seed"]
    for i, rec in enumerate(fam["train"]):
        task = cfg["data"]["pretrain_task"]
        c = dict(counts, points=counts["train_points"])
        D.bake_observations(rec.shape, task, c, seed=base * 1000 + i, out_dir=out / "train" / rec.id, name=rec.id)
    for i, rec in enumerate(fam["test"]):
        d = out / "test" / rec.id
        s = base * 1000 + 500 + i
        D.bake_observations(rec.shape, "sdf", counts, seed=s, out_dir=d, name=rec.id)
        D.bake_observations(rec.shape, "pc", counts, seed=s, out_dir=d, name=rec.id)
        D.bake_observations(rec.shape, "mvs", dict(counts, views=cfg["data"]["test_views"]), seed=s,
                            out_dir=d, name=rec.id)
    summary = {"train": [r.id for r in fam["train"]], "test": [r.id for r in fam["test"]]}
    io.write_json(out / "summary.json", summary)
    return summary


def cmd_pretrain(args, cfg):
    spec, fam = _family(args.data)
    task = cfg["data"]["pretrain_task"]
    dataset = [(r.id, _observation(args.data, "train", r.id, task)) for r in fam["train"]]
    if not dataset:
        raise CliError("data", "family has no training shapes", args.data / "family.json")
    log = io.JsonlLog(args.out / "pretrain_log.jsonl")
    prior = pretrain(dataset, C.make_arch(cfg), C.make_pretrain_config(cfg), log=log)
    ck = save_checkpoint(prior, args.out / "prior")
    report.plot_loss_curve(prior.history, args.out / "pretrain_loss.png", x_key="epoch", title="pre-training")
    final = prior.history[-1] if prior.history else {}
    return {"checkpoint": str(ck), "final_total": final.get("total")}


def _recon_one(job: dict) -> dict:
    """Worker for one shape; owns its own prior copy."""
    with threadpool_limits(1):
        cfg, task = job["cfg"], job["task"]
        prior = load_checkpoint(job["prior"])
        out = Path(job["out"])
        out.mkdir(parents=True, exist_ok=True)
        rec = D.ShapeRecord.from_dict(job["record"])
        obs = D.read_observation(job["obs"])
        run_cfg = C.make_run_config(cfg, task)
        res = infer(obs, prior, run_cfg, persist=job["persist"], log=io.JsonlLog(out / "iterations.jsonl"))
        result = HyperPrior(prior.arch, res.theta, prior.theta0, {rec.id: res.z})
        save_checkpoint(result, out / "result")
        ev = cfg["eval"]
        mesh, rep = P.score(prior.arch, res.theta, res.z, rec.shape, ev["mc_resolution"], ev["n_points"],
                            ev["tau"], cfg["seed"])
        io.write_obj(out / f"{rec.id}.obj", mesh)
        metrics = {"shape": rec.id, "task": task, "metrics": rep.to_dict(), "best_loss": res.best_loss,
                   "stage_best": res.stage_best, "nonfinite_steps": res.nonfinite_steps}
        io.write_json(out / "metrics.json", metrics)
        report.plot_loss_curve(res.history, out / "loss.png", title=f"{rec.id} ({task})")
        return metrics


def _jobs(cfg) -> int:
    return max(1, min(int(cfg["jobs"]), thread_cap()))


def _run_jobs(jobs: list, cfg) -> list:
    n = _jobs(cfg)
    if n == 1 or len(jobs) == 1:
        return [_recon_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(_recon_one, jobs))


def cmd_recon(args, cfg):
    task = TASK_OF[args.command]
    _, fam = _family(args.data)
    prior_path = _require(args.prior if args.prior.suffix == ".json" else args.prior.with_suffix(".json"),
                          "prior checkpoint")
    _load_prior(prior_path)
    jobs = []
    for rec in _select(fam, args.shapes):
        obs = _require(args.data / rec.split / rec.id / f"{rec.id}{OBS_SUFFIX[task]}", f"{task} observation")
        jobs.append({"cfg": cfg, "task": task, "prior": str(prior_path), "out": str(args.out / rec.id),
                     "record": rec.to_dict(), "obs": str(obs), "persist": args.persist})
    results = _run_jobs(jobs, cfg)
    rows = [{"shape": r["shape"], **r["metrics"]} for r in results]
    cols = ["shape", "chamfer_x1e3", "fscore", "normal_consistency"]
    (args.out / "metrics.txt").write_text(report.aligned_table(rows, cols))
    io.write_json(args.out / "metrics.json", {"task": task, "shapes": results})
    return {"task": task, "n_shapes": len(results)}


def cmd_extract_mesh(args, cfg):
    ck = _require(args.checkpoint if args.checkpoint.suffix == ".json" else args.checkpoint.with_suffix(".json"),
                  "checkpoint")
    prior = load_checkpoint(ck)
    if args.code not in prior.codebook:
        raise CliError("unknown-code", f"checkpoint has no code {args.code!r}", ck)
    res = args.resolution or cfg["eval"]["mc_resolution"]
    mesh = P.extract_mesh(prior.arch, prior.theta, prior.codebook[args.code], res)
    if mesh.empty:
        raise CliError("empty-mesh", "the zero level set is empty at this resolution", ck)
    path = io.write_obj(args.out / f"{args.code}.obj", mesh)
    return {"mesh": str(path), "vertices": len(mesh.vertices), "triangles": len(mesh.triangles)}


def _load_surface(path: Path):
    path = _require(path, "surface file")
    if path.suffix == ".obj":
        return io.read_obj(path)
    if path.suffix == ".ply":
        header = path.read_bytes()[:512]
        if b"element face" in header:
            return io.read_ply_mesh(path)
        pts, nrm = io.read_points(path)
        if nrm is None:
            raise CliError("format", "point sets need normals for evaluation", path)
        return pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    raise CliError("format", "expected .obj or .ply", path)


def cmd_eval(args, cfg):
    ev = cfg["eval"]
    rep = geo.evaluate(_load_surface(args.pred), _load_surface(args.gt), ev["n_points"], ev["tau"], cfg["seed"])
    out = {"pred": str(args.pred), "gt": str(args.gt), "metrics": rep.to_dict()}
    io.write_json(args.out / "metrics.json", out)
    return out


def _ablate_one(job: dict) -> dict:
    with threadpool_limits(1):
        cfg = job["cfg"]
        prior = load_checkpoint(job["prior"])
        rec = D.ShapeRecord.from_dict(job["record"])
        obs = D.read_observation(job["obs"])
        run_cfg = C.make_run_config(cfg, job["task"], seed=job["seed"])
        res = P.run_arm(job["arm"], obs, prior, run_cfg)
        ev = cfg["eval"]
        _, rep = P.score(prior.arch, res.theta, res.z, rec.shape, ev["mc_resolution"], ev["n_points"], ev["tau"],
                         job["seed"])
        return {"arm": job["arm"], "shape": rec.id, "seed": job["seed"], **rep.to_dict()}


def cmd_ablate(args, cfg):
    _, fam = _family(args.data)
    prior_path = _require(args.prior if args.prior.suffix == ".json" else args.prior.with_suffix(".json"),
                          "prior checkpoint")
    _load_prior(prior_path)
    seeds = [cfg["seed"] + k for k in range(args.seeds)]
    jobs = []
    for rec in _select(fam, args.shapes):
        obs = _require(args.data / rec.split / rec.id / f"{rec.id}{OBS_SUFFIX[args.task]}", "observation")
        for seed in seeds:
            for arm in P.ARMS:
                jobs.append({"cfg": cfg, "task": args.task, "prior": str(prior_path), "record": rec.to_dict(),
                             "obs": str(obs), "seed": seed, "arm": arm})
    n = _jobs(cfg)
    if n == 1:
        runs = [_ablate_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            runs = list(ex.map(_ablate_one, jobs))
    rows = []
    for arm in P.ARMS:
        mine = [r for r in runs if r["arm"] == arm]
        rows.append({"arm": arm, "n_runs": len(mine), "seeds": seeds,
                     "chamfer_median_x1e3": 1e3 * P.median([r["chamfer_mean"] for r in mine]),
                     "fscore_median": P.median([r["fscore"] for r in mine]),
                     "nc_median": P.median([r["normal_consistency"] for r in mine])})
    io.write_json(args.out / "ablation.json", {"task": args.task, "rows": rows, "runs": runs})
    cols = ["arm", "n_runs", "seeds", "chamfer_median_x1e3", "fscore_median", "nc_median"]
    (args.out / "ablation.txt").write_text(report.aligned_table(rows, cols))
    report.plot_ablation(rows, args.out / "ablation.png")
    return {"rows": rows}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "recon-sdf": cmd_recon, "recon-mv": cmd_recon,
            "recon-pc": cmd_recon, "extract-mesh": cmd_extract_mesh, "eval": cmd_eval, "ablate": cmd_ablate}


def _error_line(code: str, message: str, path=None) -> str:
    return json.dumps({"error": code, "message": message, "path": None if path is None else str(path)})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolved_config(args)
        write_run_meta(args.out, cfg, argv)
        with threadpool_limits(1):
            summary = COMMANDS[args.command](args, cfg)
        print(json.dumps({"status": "ok", "command": args.command, "out": str(args.out), **(summary or {})},
                         default=str))
        return 0
    except CliError as e:
        print(_error_line(e.code, e.message, e.path), file=sys.stderr)
    except FileNotFoundError as e:
        print(_error_line("missing-file", "file not found", e.filename or str(e)), file=sys.stderr)
    except OSError as e:
        print(_error_line("io", str(e), getattr(e, "filename", None)), file=sys.stderr)
    except (ValueError, FloatingPointError) as e:
        print(_error_line("runtime", str(e).replace("\n", " ")), file=sys.stderr)
    except Exception as e:  # last resort: still one parsable line
        if os.environ.get("PRIOROPT_DEBUG"):
            traceback.print_exc()
        print(_error_line("internal", f"{type(e).__name__}: {e}"), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
