import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from artspot import arm as arm_mod
from artspot.cli import main
from artspot.runconfig import load_run_config, parse_run_config
from artspot.errors import ConfigError

TINY = {
    "spotter": {"backbone_channels": [4, 8, 8, 8, 8], "channels": 8, "rec_channels": 8, "n_text": 8},
    "train": {"steps": 4, "batch_size": 2, "warmup": 2},
}


def write_config(tmp_path, doc=TINY):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(doc))
    return str(p)


def tree_hash(d):
    h = hashlib.sha256()
    for f in sorted(d.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(d)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(d), "--count", "4", "--base-seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory, tiny_data):
    d = tmp_path_factory.mktemp("ckpt")
    cfg = write_config(d)
    ck = d / "m.ten"
    assert main(["--config", cfg, "train", "--data", str(tiny_data), "--out", str(ck)]) == 0
    return cfg, ck


def test_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--count", "10"]) == 0
    assert capsys.readouterr().out.strip() == "generated,10"
    assert len(list((tmp_path / "a" / "images").glob("*.ppm"))) == 10
    assert len((tmp_path / "a" / "annotations.jsonl").read_text().splitlines()) == 10
    assert main(["--seed", "0", "gen-data", "--out", str(tmp_path / "b"), "--count", "10"]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--count", "0"]) == 0
    assert (tmp_path / "c" / "annotations.jsonl").read_text() == ""


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out", str(blocker / "sub"), "--count", "1"]) == 2


def test_grad_check_ok(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "op,max_rel_error,status"
    rows = [line.split(",") for line in out[1:-1]]
    assert len(rows) >= 10
    assert all(r[2] == "ok" and float(r[1]) <= 1e-4 for r in rows)
    names = {r[0] for r in rows}
    assert {"bilinear_sample.features", "bilinear_sample.grid", "tps_grid", "self_attention",
            "points_to_recognition_loss"} <= names
    assert out[-1] == f"checked,{len(rows)}"


def test_grad_check_catches_sign_error(monkeypatch, capsys):
    original = arm_mod.BilinearSample.backward

    def flipped(self, gout):
        gf, gg = original(self, gout)
        return gf, -gg

    monkeypatch.setattr(arm_mod.BilinearSample, "backward", flipped)
    assert main(["grad-check"]) == 1
    err = capsys.readouterr().err
    assert "bilinear_sample.grid" in err


def test_train_outputs(tiny_ckpt):
    cfg, ck = tiny_ckpt
    assert ck.is_file()
    rows = ck.with_suffix(".loss.csv").read_text().splitlines()
    assert rows[0] == "step,lr,total,cls,ctr,rcp,rec,num_pos,skipped"
    assert len(rows) - 1 == 4
    # six significant digits
    assert all(len(v.replace(".", "").replace("-", "").lstrip("0")) <= 6 for v in rows[1].split(",")[2:7]
               if "e" not in v)


def test_train_deterministic(tmp_path, tiny_data):
    cfg = write_config(tmp_path)
    outs = []
    for k in range(2):
        ck = tmp_path / f"m{k}.ten"
        assert main(["--config", cfg, "--threads", "1", "train", "--data", str(tiny_data), "--out", str(ck)]) == 0
        outs.append((ck.read_bytes(), ck.with_suffix(".loss.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_eval_and_missing_checkpoint(tiny_ckpt, tiny_data, tmp_path, capsys):
    cfg, ck = tiny_ckpt
    out = tmp_path / "metrics.csv"
    assert main(["--config", cfg, "eval", "--checkpoint", str(ck), "--data", str(tiny_data), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "metric,value"
    keys = {line.split(",")[0] for line in lines[1:]}
    assert {"det_f", "e2e_f", "det_precision", "e2e_recall"} <= keys
    assert main(["--config", cfg, "eval", "--checkpoint", str(tmp_path / "nope.ten"), "--data", str(tiny_data)]) == 2


def test_ablate_tiny(tmp_path, tiny_data):
    cfg = write_config(tmp_path, {**TINY, "train": {"steps": 2, "batch_size": 1, "warmup": 1}})
    out = tmp_path / "abl"
    assert main(["--config", cfg, "ablate", "--data", str(tiny_data), "--eval-data", str(tiny_data),
                 "--out", str(out)]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "mode,det_f,e2e_f"
    assert [r.split(",")[0] for r in rows[1:]] == ["gt-extract", "rec-bp-l0", "joint"]
    for mode in ("gt-extract", "rec-bp-l0", "joint"):
        assert (out / f"{mode}.ten").is_file()
        assert len((out / f"{mode}.loss.csv").read_text().splitlines()) == 3


def test_rectify_zero_detections(tiny_ckpt, tiny_data, tmp_path, capsys):
    cfg, ck = tiny_ckpt
    img = sorted((tiny_data / "images").glob("*.ppm"))[0]
    out = tmp_path / "rect"
    assert main(["--config", cfg, "rectify", "--checkpoint", str(ck), "--image", str(img), "--out", str(out)]) == 0
    # four steps from a 1% prior do not clear the 0.4 detection threshold
    assert (out / "predictions.jsonl").read_text() == ""
    assert main(["--config", cfg, "rectify", "--checkpoint", str(ck), "--image", str(tmp_path / "x.ppm"),
                 "--out", str(out)]) == 2


def test_analyze_no_matches(tiny_ckpt, tiny_data, tmp_path, capsys):
    cfg, ck = tiny_ckpt
    assert main(["--config", cfg, "analyze", "--checkpoint", str(ck), "--data", str(tiny_data),
                 "--out", str(tmp_path / "an")]) == 1
    assert "no matched" in capsys.readouterr().err


def test_config_errors(tmp_path, tiny_data):
    bad = write_config(tmp_path, {"train": {"stpes": 3}})
    assert main(["--config", bad, "train", "--data", str(tiny_data), "--out", str(tmp_path / "m.ten")]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["--config", str(tmp_path / "broken.json"), "grad-check"]) == 2
    assert main(["--threads", "0", "grad-check"]) == 2
    with pytest.raises(ConfigError):
        parse_run_config({"bogus": {}})
    with pytest.raises(ConfigError):
        parse_run_config({"train": {"mode": "nope"}})
    with pytest.raises(ConfigError):
        parse_run_config({"spotter": {"point_grad_scale": -1.0}})


def test_config_paths_relative(tmp_path):
    sub = tmp_path / "exp"
    sub.mkdir()
    p = sub / "c.json"
    p.write_text(json.dumps({"paths": {"train_data": "data"}, "spotter": {"levels": [[4, 0, None]]}}))
    cfg = load_run_config(p)
    assert cfg.resolve(cfg.paths.train_data) == sub / "data"
    assert cfg.spotter.levels[0][2] == float("inf")
    round_trip = parse_run_config(json.loads(json.dumps(cfg.to_json())))
    assert round_trip.spotter == cfg.spotter


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "artspot.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "grad-check", "train", "eval", "ablate", "rectify", "analyze"):
        assert cmd in r.stdout
