import json
import subprocess
import sys

import numpy as np
import pytest

from tapg import cli
from tapg.config import ConfigError, load_config
from tapg.transformer import load_checkpoint

TINY = """\
seed = 3

[data]
n_videos = {n_videos}
video_length = {video_length}
T = 16
channels = 4
mode = "{mode}"
window_stride = 8

[sampler]
window_group = "fib:8:21"
sample_points = 4

[model]
d_model = 8
n_heads = 2
d_ff = 16
n_layers = 1

[train]
epochs = 2
learning_rate = 1e-3

[inference]
score_floor = 0.0
"""


def write_config(tmp_path, n_videos=3, video_length=24, mode="rescale", extra=""):
    path = tmp_path / "run.toml"
    path.write_text(TINY.format(n_videos=n_videos, video_length=video_length, mode=mode) + extra)
    return path


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.mark.parametrize("sub", ["gen-data", "train", "infer", "eval", "plot"])
def test_help_for_every_subcommand(sub):
    out = subprocess.run([sys.executable, "-m", "tapg", sub, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "--config" in out.stdout


def test_config_is_required():
    with pytest.raises(SystemExit):
        cli.main(["train"])


def test_missing_config_file_fails_cleanly(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "nope.toml") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("tapg train: error:")


def test_unknown_config_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        load_config(write_config(tmp_path, extra="\n[paths]\ncolour = 1\n"))
    (tmp_path / "top.toml").write_text("learning_rate = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "top.toml")
    (tmp_path / "bad.toml").write_text("[data]\nmode = \"dense\"\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_default_config_matches_published_constants(tmp_path):
    (tmp_path / "empty.toml").write_text("")
    cfg = load_config(tmp_path / "empty.toml")
    assert cfg.data.T == 100 and cfg.sampler.sample_points == 32
    assert cfg.sampler.window_group == "fib:100:21"
    assert (cfg.inference.alpha1, cfg.inference.alpha2) == (0.9, 0.8)
    assert cfg.model.n_layers == 3 and cfg.train.learning_rate == 1e-4
    assert cfg.model.query_form.value == "OriginalFeature"


def test_gen_data_zero_videos(tmp_path):
    cfg = write_config(tmp_path, n_videos=0)
    assert run("gen-data", "--config", cfg) == 0
    assert json.loads((tmp_path / "data" / "manifest.json").read_text()) == {}
    assert json.loads((tmp_path / "data" / "annotations.json").read_text()) == {"videos": []}
    # nothing to train on: one-line error, nonzero exit
    assert run("train", "--config", cfg) == 1


def test_full_pipeline_rescale(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("gen-data", "--config", cfg) == 0
    assert run("train", "--config", cfg) == 0
    out = capsys.readouterr().out
    assert "epoch   1" in out and "L_b=" in out
    rows = [json.loads(x) for x in (tmp_path / "run" / "loss.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert run("infer", "--config", cfg) == 0
    results = json.loads((tmp_path / "run" / "results.json").read_text())
    assert sorted(results) == ["synth_0000", "synth_0001", "synth_0002"]
    for rows in results.values():
        for r in rows:
            assert 0 <= r["segment"][0] < r["segment"][1] <= 24 + 1e-9
    assert run("eval", "--config", cfg, "--plot") == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert 0 <= report["AUC"] <= 1 and "average_mAP" in report
    assert (tmp_path / "run" / "ar_an.svg").read_text().startswith("<?xml")
    assert (tmp_path / "run" / "pr.svg").exists()
    assert run("plot", "--config", cfg) == 0
    assert (tmp_path / "run" / "loss.svg").exists()


def test_eval_identical_ground_truth_is_perfect(tmp_path):
    cfg = write_config(tmp_path)
    run("gen-data", "--config", cfg)
    path = tmp_path / "data" / "annotations.json"
    ann = json.loads(path.read_text())
    results = {v["id"]: [{"segment": a["segment"], "score": 1.0 - 0.1 * i}
                         for i, a in enumerate(v["annotations"])] for v in ann["videos"]}
    (tmp_path / "res.json").write_text(json.dumps(results))
    report = cli.cmd_eval(load_config(cfg), tmp_path / "res.json", tmp_path / "rep.json")
    # several instances per video: recall is complete once AN covers them
    assert report["AR@5"] == report["AR@100"] == 1.0 and report["average_mAP"] == 1.0
    assert report["AR@1"] < 1.0 and report["AUC"] < 1.0

    # one instance per video: every AN point is perfect
    for v in ann["videos"]:
        v["annotations"] = v["annotations"][:1]
    path.write_text(json.dumps(ann))
    single = {v["id"]: results[v["id"]][:1] for v in ann["videos"]}
    (tmp_path / "res.json").write_text(json.dumps(single))
    report = cli.cmd_eval(load_config(cfg), tmp_path / "res.json", tmp_path / "rep.json")
    assert all(report[f"AR@{k}"] == 1.0 for k in (1, 5, 10, 50, 100))
    assert report["AUC"] == 1.0 and report["average_mAP"] == 1.0

    del single["synth_0001"]
    (tmp_path / "res.json").write_text(json.dumps(single))
    report = cli.cmd_eval(load_config(cfg), tmp_path / "res.json", tmp_path / "rep.json")
    assert report["missing_videos"] == ["synth_0001"]
    assert abs(report["AR@100"] - 2 / 3) < 1e-12


def test_zero_epochs_saves_initialization(tmp_path):
    cfg = write_config(tmp_path)
    run("gen-data", "--config", cfg)
    assert run("train", "--config", cfg, "--epochs", 0) == 0
    saved = load_checkpoint(tmp_path / "run" / "model.tapg")
    init = cli.build_model(load_config(cfg)).state()
    for k, v in init.items():
        assert np.array_equal(saved[k], v)


def test_resume_continues_by_epoch_index(tmp_path):
    cfg = write_config(tmp_path, extra="")
    run("gen-data", "--config", cfg)
    assert run("train", "--config", cfg, "--epochs", 1) == 0
    ckpt = tmp_path / "run" / "model.tapg"
    first = ckpt.read_bytes()
    assert run("train", "--config", cfg, "--epochs", 3, "--checkpoint", ckpt) == 0
    rows = [json.loads(x) for x in (tmp_path / "run" / "loss.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert ckpt.read_bytes() != first

    # straight three-epoch run lands on the same weights
    other = tmp_path / "straight"
    other.mkdir()
    cfg2 = write_config(other)
    run("gen-data", "--config", cfg2)
    run("train", "--config", cfg2, "--epochs", 3)
    a, b = load_checkpoint(ckpt), load_checkpoint(other / "run" / "model.tapg")
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_from_other_config_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run("gen-data", "--config", cfg)
    run("train", "--config", cfg, "--epochs", 0)
    wide = write_config(tmp_path / "..", extra="")
    text = wide.read_text().replace("d_model = 8", "d_model = 12")
    (tmp_path / "wide.toml").write_text(text)
    assert run("infer", "--config", tmp_path / "wide.toml", "--checkpoint",
               tmp_path / "run" / "model.tapg") == 1
    assert "does not match" in capsys.readouterr().err


def test_window_mode_smoke(tmp_path):
    cfg = write_config(tmp_path, video_length=40, mode="window")
    assert run("gen-data", "--config", cfg) == 0
    assert run("train", "--config", cfg, "--epochs", 1) == 0
    assert run("infer", "--config", cfg) == 0
    results = json.loads((tmp_path / "run" / "results.json").read_text())
    for rows in results.values():
        assert rows
        for r in rows:
            assert 0 <= r["segment"][0] < r["segment"][1] <= 40 + 1e-9
    assert run("eval", "--config", cfg) == 0


def test_seed_flag_changes_data(tmp_path):
    cfg = write_config(tmp_path)
    run("gen-data", "--config", cfg, "--out", tmp_path / "a")
    run("gen-data", "--config", cfg, "--out", tmp_path / "b", "--seed", 4)
    fa = (tmp_path / "a" / "features" / "synth_0000.tfea").read_bytes()
    fb = (tmp_path / "b" / "features" / "synth_0000.tfea").read_bytes()
    assert fa != fb


def test_thread_env_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("TAPG_THREADS", "2")
    cfg = write_config(tmp_path)
    assert run("gen-data", "--config", cfg) == 0
    monkeypatch.setenv("TAPG_THREADS", "zero")
    assert run("gen-data", "--config", cfg) == 1
