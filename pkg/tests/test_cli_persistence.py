import json
import os
import subprocess
import sys

import pytest

from delaysmp.cli_persistence import EXIT, emit_report, main, overall, parse_config
from delaysmp.errors import ConfigInvalid
from delaysmp.experiments import Outcome

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _out(verdict, c=1):
    return Outcome(c, f"item {c}", verdict, "detail", [], [], 0.0)


def test_shipped_configs_validate():
    cfgs = sorted(f for f in os.listdir(os.path.join(ROOT, "configs")) if f.endswith(".json"))
    assert cfgs
    for f in cfgs:
        assert main(["validate-config", "--config", os.path.join(ROOT, "configs", f), "--quiet"]) == 0


@pytest.mark.parametrize("text,field,line", [
    ('{\n  "experiment": "mp-scan",\n  "mc": {"n_paths": -5}\n}', "mc.n_paths", 3),
    ('{\n  "grid": {"T": 1.0,\n  "delta": 2.0}\n}', "grid.delta", 3),
    ('{\n  "bogus": 1\n}', "bogus", 2),
    ('{\n  "model": {"name": "nope"}\n}', "model.name", 2),
    ('{\n  "model": {"inline": {\n    "Zz": 1}}\n}', "model.inline.Zz", 3),
    ('{\n  "mc": {"seed": true}\n}', "mc.seed", 2),
])
def test_invalid_configs_name_field_and_line(text, field, line):
    with pytest.raises(ConfigInvalid) as ei:
        parse_config(text)
    assert ei.value.field == field and ei.value.line == line


def test_bad_json_reports_line():
    with pytest.raises(ConfigInvalid) as ei:
        parse_config('{\n  "mc": {\n    "seed": ,\n  }\n}')
    assert ei.value.line == 3


def test_validate_command_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "experiment": "mp-scan",\n  "mc": {"n_paths": 0}\n}\n')
    assert main(["validate-config", "--config", str(p)]) == EXIT["error"]
    assert "field mc.n_paths, line 3" in capsys.readouterr().err


def test_experiment_mismatch(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"experiment": "mp-scan"}))
    assert main(["bsde-oracle", "--config", str(p), "--out", str(tmp_path), "--quiet"]) == 1


def test_emit_report_variants(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    d1 = tmp_path / "a"
    d1.mkdir()
    assert emit_report([_out("pass", 1), _out("pass", 2)], d1) == "pass"
    assert "ALL PASS (2 items)" in (d1 / "report.txt").read_text()
    d2 = tmp_path / "b"
    d2.mkdir()
    assert emit_report([_out("pass", 1), _out("inconclusive", 9)], d2) == "inconclusive"
    text = (d2 / "report.txt").read_text()
    assert "OVERALL: INCONCLUSIVE" in text and "ALL PASS" not in text
    assert (d2 / "results.csv").read_text().count("\n") == 3


def test_overall_precedence():
    assert overall([_out("pass"), _out("inconclusive"), _out("fail")]) == "fail"
    assert overall([_out("pass"), _out("inconclusive")]) == "inconclusive"
    assert EXIT == {"pass": 0, "fail": 2, "inconclusive": 3, "error": 1}


def _run(tmp_path, *extra):
    cmd = [sys.executable, "-m", "delaysmp", "forward-convergence", "--out", str(tmp_path),
           "--paths", "400", "--seed", "3", *extra]
    return subprocess.run(cmd, capture_output=True, text=True, cwd=ROOT)


def test_run_is_deterministic_and_atomic(tmp_path):
    a, b = _run(tmp_path / "a"), _run(tmp_path / "b")
    assert a.returncode in (0, 2) and a.returncode == b.returncode
    assert " s)" in a.stdout                      # timings go to stdout only
    (da,), (db,) = os.listdir(tmp_path / "a"), os.listdir(tmp_path / "b")
    assert da.startswith("forward-convergence-")
    for name in ("ladder.csv", "results.csv", "report.txt", "config.json"):
        assert (tmp_path / "a" / da / name).read_bytes() == (tmp_path / "b" / db / name).read_bytes(), name
    assert " s)" not in (tmp_path / "a" / da / "report.txt").read_text()
    header = (tmp_path / "a" / da / "ladder.csv").read_text().splitlines()[0]
    assert header == "criterion,quantity,t0,eps,error,stderr,n_paths"


def test_error_run_leaves_report_and_no_partial(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiment": "spike-rates", "ladder": {"eps0": 0.3}, "grid": {"m_delay": 8}}))
    code = main(["spike-rates", "--config", str(cfg), "--out", str(tmp_path / "o"), "--paths", "4", "--quiet"])
    assert code == EXIT["error"]
    (d,) = os.listdir(tmp_path / "o")
    assert not d.startswith(".partial-")
    assert "\nERROR: " in (tmp_path / "o" / d / "report.txt").read_text()
