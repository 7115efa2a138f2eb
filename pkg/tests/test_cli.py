import csv
import json
import subprocess
import sys

import pytest

from star.cli import main
from star.config import ConfigError, load_config, parse_config_text
from star.dataio import load_features
from star.engine import OPS
from star.evalkit import mean_ap, read_detections
from star.model import ModelDims, ModelParams, save_checkpoint

TINY = ["--set", "synth.n_train=12", "--set", "synth.n_test=4", "--set", "hidden=6",
        "--set", "attention=6", "--set", "hp.batch_size=4"]


@pytest.fixture
def data(tmp_path):
    d = tmp_path / "data"
    assert main(["synth", "--data-dir", str(d)] + TINY) == 0
    return d


def run(*args):
    return main([str(a) for a in args] + TINY)


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg.hp.lr == 1e-4 and cfg.synth.num_classes == 5 and cfg.nms_iou == 0.4
    assert cfg.dims == ModelDims(N=60, K=16, H=cfg.hidden, A=cfg.attention, C=6)
    kv = tmp_path / "run.cfg"
    kv.write_text("# comment\nhp.lr = 0.001\nthresholds = 0.2, 0.4\nsynth.cooccurrence = true\nseed=3\n")
    cfg = load_config(kv, {"seed": 9})
    assert cfg.hp.lr == 0.001 and cfg.thresholds == (0.2, 0.4) and cfg.synth.cooccurrence
    assert cfg.seed == 9
    js = tmp_path / "run.json"
    js.write_text(json.dumps({"hp": {"beta": 0.5}, "model": {"use_coverage": False}, "max_steps": 10}))
    cfg = load_config(js)
    assert cfg.hp.beta == 0.5 and not cfg.model.use_coverage and cfg.max_steps == 10


@pytest.mark.parametrize("text", ["synth.K = 0", "bogus = 1", "hp.nope = 1", "max_steps = 1.5",
                                  "nms_iou = 0", "line without equals", "{bad json"])
def test_config_errors(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(None, parse_config_text(text))


def test_synth_writes_everything(tmp_path, capsys):
    d = tmp_path / "d"
    assert main(["synth", "--data-dir", str(d)]) == 0
    assert capsys.readouterr().out.strip() == str(d / "manifest.json")
    entries = json.loads((d / "manifest.json").read_text())
    assert len(entries) == 250
    assert len(list((d / "features").iterdir())) == 500
    assert len(list((d / "annotations").iterdir())) == 250


def test_synth_repeatable(tmp_path):
    sums = []
    for name in ("a", "b"):
        assert run("synth", "--data-dir", tmp_path / name) == 0
        sums.append([e["checksum"] for e in json.loads((tmp_path / name / "manifest.json").read_text())])
    assert sums[0] == sums[1]


def test_synth_bad_config_names_field(tmp_path, capsys):
    assert main(["synth", "--data-dir", str(tmp_path), "--set", "synth.K=0"]) == 2
    assert "K" in capsys.readouterr().err


def test_synth_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth", "--data-dir", blocker / "sub") == 3


def test_train_infer_eval(tmp_path, data, capsys):
    out = tmp_path / "out"
    assert run("train", "--data-dir", data, "--out", out, "--steps", 5) == 0
    rows = list(csv.reader((out / "loss.csv").open()))
    assert rows[0] == ["step", "class_loss", "sparsity_loss", "cov_loss", "ram_loss", "total"]
    assert [int(r[0]) for r in rows[1:]] == list(range(5))
    assert (out / "model.ckpt").exists()
    assert run("infer", "--data-dir", data, "--out", out) == 0
    preds = json.loads((out / "predictions.json").read_text())
    assert len(preds) == 4
    assert all({"labels", "classes", "ram", "truncated"} <= set(p) for p in preds.values())
    capsys.readouterr()
    assert run("eval", "--data-dir", data, "--out", out) == 0
    printed = capsys.readouterr().out
    assert "Ave-mAP" in printed
    # CLI report equals a direct library call
    videos = load_features(data, split="test")
    gts = [g for v in videos for g in v.annotation.instances]
    rep = mean_ap(read_detections(out / "detections.csv"), gts)
    assert json.loads((out / "report.json").read_text())["ave_mAP"] == rep.ave_map


def test_resume_continues_numbering(tmp_path, data):
    out = tmp_path / "out"
    assert run("train", "--data-dir", data, "--out", out, "--steps", 3) == 0
    assert run("train", "--data-dir", data, "--out", out, "--steps", 6, "--resume") == 0
    steps = [int(r[0]) for r in list(csv.reader((out / "loss.csv").open()))[1:]]
    assert steps == list(range(6))
    # the resumed run matches an uninterrupted one
    ref = tmp_path / "ref"
    assert run("train", "--data-dir", data, "--out", ref, "--steps", 6) == 0
    assert (ref / "loss.csv").read_text() == (out / "loss.csv").read_text()
    assert (ref / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()


def test_checkpoint_every(tmp_path, data):
    out = tmp_path / "out"
    assert run("train", "--data-dir", data, "--out", out, "--steps", 4, "--set", "checkpoint_every=2") == 0
    assert (out / "model.ckpt").exists()


def test_train_nonfinite_exit(tmp_path, data, capsys):
    out = tmp_path / "out"
    # one absurd update blows the weights up; the next forward pass trips the guard
    assert run("train", "--data-dir", data, "--out", out, "--steps", 5, "--set", "hp.lr=1e300") == 4
    assert "non-finite loss at step 1" in capsys.readouterr().err


def test_train_missing_data(tmp_path):
    assert run("train", "--data-dir", tmp_path / "none", "--out", tmp_path) == 3


def test_infer_with_zero_checkpoint(tmp_path, data):
    dims = ModelDims(N=60, K=16, H=6, A=6, C=6)
    zeros = ModelParams.zeros(dims).tensors
    ckpt = tmp_path / "zero.ckpt"
    save_checkpoint(ckpt, dims, {f"{s}.{k}": v for s in ("rgb", "flow") for k, v in zeros.items()})
    assert run("infer", "--data-dir", data, "--out", tmp_path / "o", "--checkpoint", ckpt) == 0
    assert (tmp_path / "o" / "detections.csv").exists()


def test_infer_checkpoint_mismatch(tmp_path, data):
    dims = ModelDims(N=60, K=16, H=7, A=6, C=6)
    ckpt = tmp_path / "bad.ckpt"
    save_checkpoint(ckpt, dims, {f"rgb.{k}": v for k, v in ModelParams.zeros(dims).tensors.items()})
    assert run("infer", "--data-dir", data, "--out", tmp_path, "--checkpoint", ckpt) == 5
    ckpt.write_bytes(ckpt.read_bytes()[:60])
    assert run("infer", "--data-dir", data, "--out", tmp_path, "--checkpoint", ckpt) == 5


def test_infer_deterministic(tmp_path, data):
    out = tmp_path / "out"
    assert run("train", "--data-dir", data, "--out", out, "--steps", 3) == 0
    assert run("infer", "--data-dir", data, "--out", out) == 0
    first = (out / "detections.csv").read_bytes()
    assert run("infer", "--data-dir", data, "--out", out) == 0
    assert (out / "detections.csv").read_bytes() == first


def test_eval_perfect_and_empty(tmp_path, data, capsys):
    videos = load_features(data, split="test")
    det = tmp_path / "gt.csv"
    with det.open("w") as fh:
        fh.write("video_id,class_id,start,end,score\n")
        for v in videos:
            for g in v.annotation.instances:
                fh.write(f"{v.id},{g.cls},{g.start:.3f},{g.end:.3f},1.0\n")
    assert run("eval", "--data-dir", data, "--out", tmp_path / "r1", "--detections", det) == 0
    assert "Ave-mAP\t1.0000" in capsys.readouterr().out
    empty = tmp_path / "empty.csv"
    empty.write_text("video_id,class_id,start,end,score\n")
    assert run("eval", "--data-dir", data, "--out", tmp_path / "r2", "--detections", empty) == 0
    assert "Ave-mAP\t0.0000" in capsys.readouterr().out


def test_eval_schema_mismatch(tmp_path, data):
    bad = tmp_path / "bad.csv"
    bad.write_text("vid,cls\n")
    assert run("eval", "--data-dir", data, "--detections", bad) == 6


def test_check_pristine_lists_every_op(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    for op in OPS:
        assert f"op:{op} " in out
    assert "loss:total" in out and "identity" in out
    assert "FAIL" not in out


def test_check_fault_hook(monkeypatch, capsys):
    monkeypatch.setenv("STAR_INJECT_GRAD_FAULT", "sigmoid")
    assert main(["check"]) == 7
    assert "FAIL  op:sigmoid" in capsys.readouterr().out
    monkeypatch.setenv("STAR_INJECT_GRAD_FAULT", "conv")
    assert main(["check"]) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "star.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "train", "infer", "eval", "check"):
        assert cmd in res.stdout
