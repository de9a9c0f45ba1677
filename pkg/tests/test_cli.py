import json
import os
import shutil
import subprocess
import sys

import pytest

from concordance import config as C
from concordance.cli import Workspace, main
from concordance.errors import ConfigError, StaleInput

TINY = {
    "schema": C.SCHEMA,
    "data": {"num_sequences": 6, "num_test": 2, "labeled_fraction": 0.34},
    "train": {"epochs": 2},
    "sweep": {"thetas": [0.0, 0.7]},
}
PIPELINE = ["synth", "teach", "fuse-seg", "fuse-det", "select", "train", "eval"]


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def run(workdir, cmd, config, *extra):
    return main([cmd, "-w", str(workdir), "-c", config, *extra])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, tiny_config):
    d = tmp_path_factory.mktemp("run")
    for cmd in PIPELINE:
        assert run(d, cmd, tiny_config) == 0, cmd
    return d


def test_full_pipeline_writes_every_stage(pipeline_dir, capsys):
    for stage in ("data", "teach", "fuse_seg", "fuse_det", "select", "train", "eval"):
        rec = json.loads((pipeline_dir / stage / "stage.json").read_text())
        assert rec["stage"] == stage and rec["outputs"]
        assert set(rec["versions"]) == {"python", "numpy", "concordance"}
    metrics = json.loads((pipeline_dir / "eval" / "metrics.json").read_text())
    assert metrics["schema"] == "concordance.metrics/1"
    assert 0.0 <= metrics["mean"] <= 1.0
    manifest = json.loads((pipeline_dir / "data" / "manifest.json").read_text())
    assert len(manifest["splits"]["labeled"]) == 2 and len(manifest["splits"]["test"]) == 2
    assert json.loads((pipeline_dir / "config.json").read_text())["train"]["epochs"] == 2


def test_unchanged_stage_is_skipped(pipeline_dir, tiny_config):
    path = pipeline_dir / "train" / "model.json"
    before = path.stat().st_mtime_ns
    assert run(pipeline_dir, "train", tiny_config) == 0
    assert path.stat().st_mtime_ns == before


def test_tampered_upstream_is_refused(tmp_path, pipeline_dir, tiny_config, capsys):
    d = tmp_path / "copy"
    shutil.copytree(pipeline_dir, d)
    with open(d / "fuse_seg" / "fused.jsonl", "a") as f:
        f.write("\n")
    assert run(d, "select", tiny_config, "--force") == 3
    assert "changed since it ran" in capsys.readouterr().err
    with pytest.raises(StaleInput):
        Workspace(d).require("fuse_seg")


def test_rebuilt_upstream_makes_downstream_stale(tmp_path, pipeline_dir, tiny_config):
    d = tmp_path / "copy"
    shutil.copytree(pipeline_dir, d)
    assert run(d, "fuse-seg", tiny_config, "--theta", "0.8") == 0
    with pytest.raises(StaleInput):
        Workspace(d).require("select")
    assert run(d, "train", tiny_config) == 3
    assert run(d, "select", tiny_config, "--theta", "0.8") == 0
    assert json.loads((d / "select" / "summary.json").read_text())["theta"] == 0.8


def test_supervised_only_and_compare(tmp_path, pipeline_dir, tiny_config, capsys):
    d = tmp_path / "sup"
    shutil.copytree(pipeline_dir, d)
    for cmd in ("select", "train", "eval"):
        extra = ["--supervised-only"] if cmd == "select" else []
        assert run(d, cmd, tiny_config, *extra) == 0
    summary = json.loads((d / "select" / "summary.json").read_text())
    assert summary["use_pseudo"] is False and summary["pseudo"]["points"] == 0
    capsys.readouterr()
    out = tmp_path / "table.json"
    a, b = str(d / "eval" / "metrics.json"), str(pipeline_dir / "eval" / "metrics.json")
    assert main(["compare", a, b, "--names", "supervised,concordance", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "supervised" in text and "mIoU" in text
    assert json.loads(out.read_text())["rows"][0]["name"] == "supervised"


def test_sweep_writes_curve(tmp_path, pipeline_dir, tiny_config):
    d = tmp_path / "sw"
    shutil.copytree(pipeline_dir, d)
    assert run(d, "sweep", tiny_config) == 0
    curve = json.loads((d / "sweep" / "curve.json").read_text())
    assert [r["theta"] for r in curve["rows"]] == [0.0, 0.7]
    assert curve["rows"][0]["selected_fraction"] == 1.0
    header = (d / "sweep" / "curve.csv").read_text().splitlines()[0]
    assert header == "theta,miou,selected_fraction,selected_accuracy,ap"


def test_config_errors_exit_2(tmp_path, tiny_config, capsys):
    assert run(tmp_path, "synth", tiny_config, "--set", "fusion.nope=1") == 2
    assert run(tmp_path, "synth", tiny_config, "--set", "fusion.theta=1.5") == 2
    assert run(tmp_path, "synth", tiny_config, "--set", "teachers.ranges=[]") == 2
    assert main(["synth", "-w", str(tmp_path), "-c", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": "concordance.config/0"}))
    assert main(["synth", "-w", str(tmp_path), "-c", str(bad)]) == 2
    assert "unsupported schema" in capsys.readouterr().err


def test_data_errors_exit_3(tmp_path, tiny_config):
    assert run(tmp_path, "teach", tiny_config) == 3  # no data stage yet
    assert run(tmp_path, "synth", tiny_config, "--labeled-fraction", "1.0") == 0
    assert run(tmp_path, "teach", tiny_config) == 3  # unlabelled split is empty
    assert main(["compare", str(tmp_path / "a.json"), str(tmp_path / "b.json")]) == 3


def test_config_precedence(tmp_path, monkeypatch):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"fusion": {"theta": 0.8, "lam": 0.2}}))
    monkeypatch.setenv(C.ENV_VAR, str(f))
    cfg = C.load_config(None, ["fusion.theta=0.9"])
    assert cfg["fusion"] == {"lam": 0.2, "theta": 0.9}
    assert cfg["train"] == C.DEFAULTS["train"]
    monkeypatch.delenv(C.ENV_VAR)
    assert C.load_config()["fusion"]["theta"] == 0.7
    assert C.parse_override("teachers.mode=ensemble") == (["teachers", "mode"], "ensemble")
    with pytest.raises(ConfigError):
        C.parse_override("fusion.theta")


def test_teacher_specs_from_config():
    cfg = C.load_config()
    con = C.teacher_specs(cfg)
    assert [t.temporal_range for t in con] == [1, 2, 3]
    ens = C.teacher_specs(C.load_config(None, ["teachers.mode=ensemble"]))
    assert [t.temporal_range for t in ens] == [2, 2, 2] and len({t.seed for t in ens}) == 3


def test_console_script_with_env_config(tmp_path, tiny_config):
    env = dict(os.environ, **{C.ENV_VAR: tiny_config})
    proc = subprocess.run(
        [sys.executable, "-m", "concordance", "synth", "-w", str(tmp_path)],
        env=env, capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    rec = json.loads((tmp_path / "data" / "stage.json").read_text())
    assert rec["settings"]["data"]["num_sequences"] == 6
    proc = subprocess.run([sys.executable, "-m", "concordance", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout


def test_parallel_teachers_match_serial(tmp_path, pipeline_dir, tiny_config):
    d = tmp_path / "par"
    shutil.copytree(pipeline_dir, d)
    assert run(d, "teach", tiny_config, "--workers", "2", "--force") == 0
    for name in ("predictions.jsonl", "detections.jsonl"):
        assert (d / "teach" / name).read_bytes() == (pipeline_dir / "teach" / name).read_bytes()


def test_trained_teachers(tmp_path, pipeline_dir, tiny_config):
    d = tmp_path / "trained"
    shutil.copytree(pipeline_dir, d)
    assert run(d, "teach", tiny_config, "--kind", "trained", "--set", "teachers.trained.epochs=1") == 0
    assert sorted(p.name for p in (d / "teach" / "models").iterdir()) == ["T1s0.json", "T2s1.json", "T3s2.json"]
    assert run(d, "fuse-seg", tiny_config) == 0
    assert run(d, "fuse-det", tiny_config) == 3  # trained teachers emit no boxes
