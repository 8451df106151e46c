import csv
import json
import subprocess
import sys

import pytest

from scalefuse import cli, io


def manifest(tmp_path, world=None, **extra):
    path = tmp_path / "manifest.json"
    body = {"world": world or {"preset": "three-robot-loop"}, "seed": 0, **extra}
    path.write_text(json.dumps(body))
    return path


def run_all(tmp_path, out, **extra):
    m = manifest(tmp_path, **extra)
    for cmd in ("simulate", "fuse", "eval", "report"):
        assert cli.main([cmd, "--manifest", str(m), "--out", str(out)]) == 0
    return out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_noiseless_three_session_end_to_end(tmp_path):
    out = run_all(tmp_path, tmp_path / "run")
    report = json.loads((out / "fuse_report.json").read_text())
    assert report["final_chi2"] < 1e-10
    (ate,) = rows(out / "ate.csv")
    assert float(ate["rmse"]) < 1e-6
    truth = json.loads((out / "truth.json").read_text())
    assert truth["session_scales"] == [1.0, 2.0, 0.5]


def test_report_schema(tmp_path):
    out = run_all(tmp_path, tmp_path / "run")
    rep = out / "report"
    with open(rep / "scale_trajectory.csv") as fh:
        assert fh.readline().strip() == "session,index,scale"
    with open(rep / "ate.csv") as fh:
        assert fh.readline().strip() == "label,rmse,mean,median,max,n"
    with open(out / "verdicts.csv") as fh:
        assert fh.readline().strip() == "edge,decision,delta_s,tau"
    scales = rows(rep / "scale_trajectory.csv")
    assert len(scales) == 94 and {r["session"] for r in scales} == {"0", "1", "2"}
    assert {r["false_positive"] for r in rows(rep / "verdicts.csv")} == {"false"}


def test_same_manifest_gives_identical_csvs(tmp_path):
    a = run_all(tmp_path, tmp_path / "a")
    b = run_all(tmp_path, tmp_path / "b")
    produced = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert len(produced) >= 7
    for rel in produced:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_eval_identical_files_is_zero(tmp_path, capsys):
    out = run_all(tmp_path, tmp_path / "run")
    gt = out / "groundtruth.tum"
    assert cli.main(["eval", "--estimate", str(gt), "--reference", str(gt)]) == 0
    assert "ATE rmse 0 m" in capsys.readouterr().out
    kitti = out / "groundtruth.kitti"
    assert cli.main(["eval", "--estimate", str(kitti), "--reference", str(kitti),
                     "--out", str(tmp_path / "k"), "--label", "gt"]) == 0
    (row,) = rows(tmp_path / "k" / "ate.csv")
    assert row["label"] == "gt" and row["rmse"] == "0"


def test_flags_override_manifest(tmp_path):
    m = manifest(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["simulate", "--manifest", str(m), "--out", str(out), "--seed", "5"]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 5
    assert cli.main(["fuse", "--manifest", str(m), "--out", str(out), "--mode", "anchor-only",
                     "--alarm", "off"]) == 0
    report = json.loads((out / "fuse_report.json").read_text())
    assert report["mode"] == "anchor-only" and report["alarm"] is False
    assert [s["mode"] for s in report["stages"]] == ["anchor-only"]


@pytest.mark.parametrize("argv, needle", [
    (["simulate"], "--manifest is required"),
    (["simulate", "--manifest", "/nonexistent.json"], "manifest not found"),
    (["fuse", "--out", "EMPTY"], "input not found"),
    (["report", "--out", "EMPTY"], "lacks"),
    (["eval"], "pass --estimate"),
])
def test_errors_exit_nonzero_with_message(tmp_path, capsys, argv, needle):
    argv = [str(tmp_path / "empty") if a == "EMPTY" else a for a in argv]
    assert cli.main(argv) == 2
    assert needle in capsys.readouterr().err


def test_config_violation_exits_nonzero(tmp_path, capsys):
    m = manifest(tmp_path, alarm={"tau_base": -1.0})
    out = tmp_path / "run"
    assert cli.main(["simulate", "--manifest", str(m), "--out", str(out)]) == 0
    assert cli.main(["fuse", "--manifest", str(m), "--out", str(out)]) == 2
    assert "tau_base" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"world": {"preset": "three-robot-loop"}, "extra": 1}))
    assert cli.main(["simulate", "--manifest", str(bad), "--out", str(out)]) == 2


def test_malformed_packets_report_the_line(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / "packets.jsonl").write_text('{"session_id": 0}\n')
    (out / "loops.jsonl").write_text("")
    assert cli.main(["fuse", "--out", str(out)]) == 2
    assert "packets.jsonl:1" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "scalefuse.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
