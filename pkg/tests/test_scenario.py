import json
from pathlib import Path

import numpy as np
import pytest

import mfoc as m
from mfoc.fields import kernel_with_fd_derivatives
from mfoc.scenario import ScenarioError, load_scenario, scenario_from_dict

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def minimal_raw():
    return {
        "dimension": 1,
        "horizon": 1.0,
        "steps": 10,
        "initial_measure": {"points": [[1.0]], "weights": [1.0]},
        "kernel": {"id": "zero"},
        "control": {
            "basis": [{"id": "axis", "params": {"axis": 0}}],
            "coefficients": {"constant": [-0.5]},
            "bound": 2.0,
        },
    }


def test_load_shipped_scenarios():
    for name in ("lqr.json", "constrained.json", "interaction_needle.json",
                 "gradcheck_catalog.json"):
        sc = load_scenario(SCENARIOS / name)
        assert sc.grid.steps == sc.law.num_cells


def test_unknown_kernel_id_named_in_error():
    raw = minimal_raw()
    raw["kernel"] = {"id": "bogus"}
    with pytest.raises(ScenarioError, match="bogus"):
        scenario_from_dict(raw)


def test_multiplier_arity_checked():
    raw = minimal_raw()
    raw["state_constraints"] = [{"id": "affine_moment", "params": {}}]
    raw["multipliers"] = {"lambda0": 1, "constraint_measures": []}
    with pytest.raises(ScenarioError, match="constraint measures"):
        scenario_from_dict(raw)


def test_coefficient_csv_table(tmp_path):
    rows = "\n".join(f"{k}, {0.1 * k}" for k in range(10))
    (tmp_path / "coeffs.csv").write_text("t_cell, c_1\n" + rows)
    raw = minimal_raw()
    raw["control"]["coefficients"] = {"path": "coeffs.csv"}
    sc = scenario_from_dict(raw, base_dir=tmp_path)
    assert sc.law.coefficients[3, 0] == pytest.approx(0.3)


def test_coefficient_csv_must_cover_all_cells(tmp_path):
    (tmp_path / "coeffs.csv").write_text("t_cell, c_1\n0, 1.0\n2, 1.0\n")
    raw = minimal_raw()
    raw["control"]["coefficients"] = {"path": "coeffs.csv"}
    with pytest.raises(ScenarioError):
        scenario_from_dict(raw, base_dir=tmp_path)


def test_initial_measure_from_file(tmp_path):
    mu = m.DiscreteMeasure.uniform([[0.0], [1.0]])
    (tmp_path / "cloud.csv").write_text(mu.to_csv())
    raw = minimal_raw()
    raw["initial_measure"] = {"path": "cloud.csv"}
    sc = scenario_from_dict(raw, base_dir=tmp_path)
    assert sc.initial_measure.num_atoms == 2


def test_fd_fallback_kernel_matches_catalog():
    exact = m.kernel_catalog("bounded_confidence", 2)
    fallback = kernel_with_fd_derivatives(
        2, exact.eval, exact.bounds, name="user_saturating"
    )
    rng = np.random.default_rng(5)
    for _ in range(20):
        x, y = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        assert np.abs(fallback.jac_x(0.0, x, y) - exact.jac_x(0.0, x, y)).max() < 1e-8
        assert np.abs(fallback.jac_y(0.0, x, y) - exact.jac_y(0.0, x, y)).max() < 1e-8


def test_joint_cloud_doubles_dimension():
    from conftest import build_lqr, solve_lqr

    setup = build_lqr(steps=20)
    traj, cp = solve_lqr(setup)
    joint = cp.joint_cloud(10)
    assert joint.dim == 2
    assert joint.points[0, 0] == traj.positions[10, 0, 0]
    assert joint.points[0, 1] == cp.costates[10, 0, 0]


def test_simulate_summary_carries_advisory(tmp_path):
    from mfoc.cli import main

    out = tmp_path / "out"
    assert main(["simulate", "--scenario", str(SCENARIOS / "lqr.json"),
                 "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["hypotheses_ok"] is True
    assert summary["hypotheses_violations"] == []
