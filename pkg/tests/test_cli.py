import json
import subprocess
import sys

import numpy as np
import pytest

from spectmamba.cfp import read_track
from spectmamba.cli import main
from spectmamba.decoder import read_contour_csv
from spectmamba.metrics import METRICS

TINY = {"encoder": {"d_model": 8, "num_layers": 1, "d_state": 3, "max_frames": 64}}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """synth -> train -> (files) on a two-clip corpus, through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps({"count": 2, "seconds": 0.5, "seed": 5}))
    (root / "pool.json").write_text(json.dumps({"count": 2, "seconds": 0.5, "seed": 6,
                                                "labeled": False}))
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["synth", "--spec", str(root / "spec.json"), "--out", str(root / "lab")]) == 0
    assert main(["synth", "--spec", str(root / "pool.json"), "--out", str(root / "unl")]) == 0
    code = main(["train", "--config", str(root / "cfg.json"), "--labeled",
                 str(root / "lab" / "manifest.json"), "--unlabeled", str(root / "unl" / "manifest.json"),
                 "--out", str(root / "run"), "--steps", "3", "--omega", "0.2"])
    assert code == 0
    return root


def test_train_outputs(small_run):
    run = small_run / "run"
    assert (run / "final.bin").exists()
    lines = (run / "loss_log.csv").read_text().splitlines()
    assert lines[0] == "step,L_l,L_f0_cbr,L_note_cbr,L_total,mu_f0,mu_note" and len(lines) == 4
    from spectmamba import checkpoint as ck

    cfg = ck.load(run / "final.bin").config
    assert cfg["omega"] == 0.2 and cfg["steps"] == 3


def test_infer_and_eval(small_run, capsys):
    ckpt = str(small_run / "run" / "final.bin")
    wav = small_run / "lab" / "clip_0000.wav"
    assert main(["infer", "--ckpt", ckpt, "--audio", str(wav), "--out", str(small_run / "c.csv")]) == 0
    t, f0 = read_contour_csv(small_run / "c.csv")
    assert f0.size == 50
    capsys.readouterr()
    out = small_run / "report.json"
    assert main(["eval", "--ckpt", ckpt, "--manifest", str(small_run / "lab" / "manifest.json"),
                 "--out", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert set(printed) == set(METRICS) | {"frames"} == set(json.loads(out.read_text()))
    rows = out.with_suffix(".csv").read_text().splitlines()
    assert rows[0].startswith("clip,") and len(rows) == 3


def test_eval_with_contours(small_run, tmp_path):
    for i in range(2):
        t, f = read_track(small_run / "lab" / f"clip_{i:04d}.csv")
        np.savetxt(tmp_path / f"clip_{i:04d}.csv", np.c_[t, f], delimiter=",")
    out = tmp_path / "r.json"
    assert main(["eval", "--contours", str(tmp_path), "--manifest",
                 str(small_run / "lab" / "manifest.json"), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["rpa"] == 100.0 and doc["vfa"] == 0.0 and doc["oa"] == 100.0


def test_exit_code_config_error(small_run, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"encoder": {"d_model": -3}}))
    code = main(["train", "--config", str(tmp_path / "bad.json"), "--labeled",
                 str(small_run / "lab" / "manifest.json"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "encoder/d_model" in capsys.readouterr().err


def test_exit_code_validation_error(small_run, tmp_path):
    # evaluating against an unlabeled manifest
    code = main(["eval", "--ckpt", str(small_run / "run" / "final.bin"), "--manifest",
                 str(small_run / "unl" / "manifest.json"), "--out", str(tmp_path / "r.json")])
    assert code == 2


def test_exit_code_numeric_failure(small_run, tmp_path):
    (tmp_path / "hot.json").write_text(json.dumps({**TINY, "learning_rate": 1e38}))
    code = main(["train", "--config", str(tmp_path / "hot.json"), "--labeled",
                 str(small_run / "lab" / "manifest.json"), "--out", str(tmp_path / "o"),
                 "--steps", "5"])
    assert code == 3
    assert (tmp_path / "o" / "last_good.bin").exists()


def test_exit_code_io_error(small_run, tmp_path, capsys):
    code = main(["infer", "--ckpt", str(small_run / "run" / "final.bin"), "--audio",
                 str(tmp_path / "absent.wav"), "--out", str(tmp_path / "x.csv")])
    assert code == 4
    assert "absent.wav" in capsys.readouterr().err
    (tmp_path / "m.json").write_text(json.dumps({"entries": [{"audio": "nope.wav"}]}))
    code = main(["train", "--labeled", str(tmp_path / "m.json"), "--out", str(tmp_path / "o")])
    assert code == 4


def test_synth_explicit_clips(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"clips": [{"f0_hz": 300.0, "seconds": 0.3}]}))
    assert main(["synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "d")]) == 0
    t, f = read_track(tmp_path / "d" / "clip_0000.csv")
    assert f.size == 30 and np.all(f == 300.0)
    (tmp_path / "bad.json").write_text(json.dumps({"count": 0}))
    assert main(["synth", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "e")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "spectmamba", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("train", "infer", "eval", "bench", "synth"):
        assert cmd in res.stdout
