import json

import numpy as np
import pytest

from prioropt import config as C
from prioropt import geometry as geo
from prioropt import io
from prioropt.cli import main

TINY = {
    "data": {"family": {"n_shapes": 3, "kinds": ["sphere"], "train_fraction": 0.67, "test_fraction": 0.33},
             "counts": {"sdf": 3000, "views": 2, "resolution": 16, "points": 100, "train_points": 200},
             "test_views": 2},
    "pretrain": {"epochs": 30, "decay_epochs": []},
    "infer": {"sdf": {"epochs": 9}, "pc": {"epochs": 9}, "mvs": {"epochs": 3, "decay_epochs": []}},
    "eval": {"mc_resolution": 32, "n_points": 1000},
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    common = ["--preset", "desk", "--config", cfg]
    assert main([str(a) for a in ["gen-data", *common, "--out", root / "data"]]) == 0
    assert main([str(a) for a in ["pretrain", *common, "--data", root / "data", "--out", root / "prior"]]) == 0
    return root, common


def test_unknown_flag_is_one_json_line(capsys, tmp_path):
    code, _, err = run(["recon-sdf", "--bogus", "--out", tmp_path], capsys)
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1
    msg = json.loads(lines[0])
    assert set(msg) == {"error", "message", "path"}


def test_missing_file_error(capsys, tmp_path):
    code, _, err = run(["eval", "--pred", tmp_path / "nope.obj", "--gt", tmp_path / "nope.obj", "--out", tmp_path],
                       capsys)
    assert code == 1 and json.loads(err.strip())["path"].endswith("nope.obj")


def test_eval_identical_mesh(capsys, tmp_path):
    mesh = geo.icosphere(3)
    io.write_obj(tmp_path / "m.obj", mesh)
    code, _, _ = run(["eval", "--pred", tmp_path / "m.obj", "--gt", tmp_path / "m.obj", "--out", tmp_path / "e"],
                     capsys)
    assert code == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())["metrics"]
    assert m["chamfer_mean"] == 0.0 and m["fscore"] == 100.0 and m["normal_consistency"] == pytest.approx(1.0)


def test_config_layering_and_unknown_key(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 5, "eval": {"tau": 0.05}}))
    cfg = C.resolve("desk", f, ["seed=7", "infer.pc.lr=0.001"])
    assert cfg["seed"] == 7 and cfg["eval"]["tau"] == 0.05 and cfg["infer"]["pc"]["lr"] == 0.001
    assert cfg["arch"]["hidden_width"] == 64 and cfg["eval"]["mc_resolution"] == 64
    with pytest.raises(C.ConfigError):
        C.resolve("paper", None, ["infer.pc.lrr=1"])
    with pytest.raises(C.ConfigError):
        C.resolve("nope")


def test_recon_writes_outputs_and_resolved_config(workspace, capsys):
    root, common = workspace
    out = root / "recon"
    code, _, _ = run(["recon-sdf", *common, "--data", root / "data", "--prior", root / "prior" / "prior",
                      "--out", out, "--seed", 3], capsys)
    assert code == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 3 and cfg["preset"] == "desk" and cfg["eval"]["mc_resolution"] == 32
    meta = json.loads((out / "run.json").read_text())
    assert {"version", "seed", "argv", "timestamp"} <= set(meta)
    shapes = json.loads((out / "metrics.json").read_text())["shapes"]
    sid = shapes[0]["shape"]
    for name in ("iterations.jsonl", "result.json", "result.bin", f"{sid}.obj", "metrics.json", "loss.png"):
        assert (out / sid / name).exists(), name
    assert (out / "metrics.txt").read_text().startswith("shape")
    code, _, _ = run(["extract-mesh", *common, "--checkpoint", out / sid / "result", "--code", sid,
                      "--out", root / "mesh"], capsys)
    assert code == 0 and (root / "mesh" / f"{sid}.obj").exists()


def test_recon_deterministic(workspace, capsys):
    root, common = workspace
    metrics = []
    for k in range(2):
        out = root / f"det{k}"
        assert run(["recon-pc", *common, "--data", root / "data", "--prior", root / "prior" / "prior",
                    "--out", out, "--deterministic"], capsys)[0] == 0
        metrics.append((out / "metrics.json").read_bytes())
    assert metrics[0] == metrics[1]


def test_ablate_rows(workspace, capsys):
    root, common = workspace
    out = root / "abl"
    code, _, _ = run(["ablate", *common, "--data", root / "data", "--prior", root / "prior" / "prior",
                      "--task", "sdf", "--seeds", 2, "--out", out], capsys)
    assert code == 0
    abl = json.loads((out / "ablation.json").read_text())
    assert [r["arm"] for r in abl["rows"]] == ["full", "z-only", "random-init", "no-l2"]
    assert all(r["seeds"] == [0, 1] for r in abl["rows"])
    assert all(np.isfinite(r["chamfer_median_x1e3"]) or r["arm"] == "random-init" for r in abl["rows"])
    assert (out / "ablation.png").exists() and (out / "ablation.txt").exists()
