import json

import pytest

from rbsched.cli import main

from conftest import CONFIGS


def test_validate(capsys):
    assert main(["validate", str(CONFIGS / "desk.yaml"), str(CONFIGS / "rmin_mmtc.yaml")]) == 0
    assert "ok" in capsys.readouterr().out


def test_validate_reports_bad_file(tmp_path, capsys):
    f = tmp_path / "bad.yaml"
    f.write_text("grid: {T: 1.0e-3, W: 100.0e+3}\n")
    assert main(["validate", str(f)]) == 2
    assert "error" in capsys.readouterr().err


def test_complexity_json(capsys):
    assert main(["complexity", str(CONFIGS / "desk.yaml"), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["scenario"] for r in rows] == ["drbs", "srbs"]
    assert rows[0]["gamma2"] - rows[1]["gamma2"] == 4 * 4 * 2 * 1


def test_run_with_overrides(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["run", str(CONFIGS / "tiny_both.yaml"), "--trials", "1", "--solver", "monotonic",
                 "--out", str(out), "--seed", "2"])
    assert code == 0
    assert (out / "metrics.csv").exists() and (out / "manifest.json").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 2 and man["trials"] == 1


def test_oracle(capsys):
    assert main(["oracle", str(CONFIGS / "tiny.yaml"), "--grid", "40", "--seed", "1",
                 "--solver", "monotonic"]) == 0
    out = capsys.readouterr().out
    assert "oracle" in out and "polyblock" in out
