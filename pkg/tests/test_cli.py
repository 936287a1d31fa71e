import json
from pathlib import Path

import numpy as np
import pytest

from mfoc.cli import main

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def write_scenario(tmp_path, payload, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def lqr_payload():
    return json.loads((SCENARIOS / "lqr.json").read_text())


def test_simulate_lqr(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["simulate", "--scenario", str(SCENARIOS / "lqr.json"), "--out", str(out)])
    assert code == 0
    rows = (out / "trajectory.csv").read_text().splitlines()
    assert len(rows) == 1 + 201  # header + one row per node per atom
    summary = json.loads((out / "summary.json").read_text())
    assert summary["total_cost"] == pytest.approx(0.25, abs=1e-9)


def test_simulate_missing_kernel_id(tmp_path, capsys):
    payload = lqr_payload()
    payload["kernel"] = {"id": "does_not_exist"}
    code = main(["simulate", "--scenario", write_scenario(tmp_path, payload)])
    assert code == 2
    assert "does_not_exist" in capsys.readouterr().err


def test_simulate_blowup_status(tmp_path, capsys):
    payload = lqr_payload()
    payload["steps"] = 20
    payload["kernel"] = {"id": "linear_attraction", "params": {"strength": 1e6}}
    payload["initial_measure"] = {"points": [[1.0], [-1.0]], "weights": [0.5, 0.5]}
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["simulate", "--scenario", write_scenario(tmp_path, payload)])
    assert code == 3
    assert "step" in capsys.readouterr().err


def test_gradcheck_catalog(capsys):
    code = main([
        "gradcheck", "--scenario", str(SCENARIOS / "gradcheck_catalog.json"),
        "--clouds", "5",
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "variance" in out and "ok" in out


def test_gradcheck_broken_fixture(tmp_path, capsys):
    payload = lqr_payload()
    payload["terminal_cost"] = {"id": "variance_miscalibrated", "params": {}}
    code = main(["gradcheck", "--scenario", write_scenario(tmp_path, payload), "--clouds", "3"])
    assert code == 1
    err = capsys.readouterr().err
    assert "variance_miscalibrated" in err


def test_pmp_check_lqr(tmp_path, capsys):
    out = tmp_path / "report"
    code = main([
        "pmp-check", "--scenario", str(SCENARIOS / "lqr.json"), "--out", str(out),
    ])
    assert code == 0
    report = json.loads((out / "certificate.json").read_text())
    assert report["passed"] is True
    assert max(report["maximization"]["gaps"]) <= 1e-6


def test_pmp_check_constrained(capsys):
    assert main(["pmp-check", "--scenario", str(SCENARIOS / "constrained.json")]) == 0


def test_pmp_check_sign_flipped_costate(tmp_path, capsys):
    payload = lqr_payload()
    # negated terminal cost flips the terminal costate sign
    payload["terminal_cost"] = {"id": "quadratic_moment", "params": {"scale": -1.0}}
    code = main(["pmp-check", "--scenario", write_scenario(tmp_path, payload)])
    assert code == 1
    assert "maximization" in capsys.readouterr().out


def test_needle_check_interaction(capsys):
    code = main(["needle-check", "--scenario", str(SCENARIOS / "interaction_needle.json")])
    assert code == 0
    assert "verified" in capsys.readouterr().out


def test_dt_override_changes_grid(tmp_path):
    out = tmp_path / "fine"
    code = main([
        "simulate", "--scenario", str(SCENARIOS / "lqr.json"), "--out", str(out),
        "--dt-override", "0.01",
    ])
    assert code == 0
    rows = (out / "trajectory.csv").read_text().splitlines()
    assert len(rows) == 1 + 101


def test_scenario_roundtrip_bit_identical(tmp_path):
    from mfoc.scenario import load_scenario

    sc = load_scenario(SCENARIOS / "lqr.json")
    copy_path = tmp_path / "copy.json"
    copy_path.write_text(sc.to_json())

    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--scenario", str(SCENARIOS / "lqr.json"), "--out", str(out1)]) == 0
    assert main(["simulate", "--scenario", str(copy_path), "--out", str(out2)]) == 0
    assert (out1 / "trajectory.csv").read_bytes() == (out2 / "trajectory.csv").read_bytes()
