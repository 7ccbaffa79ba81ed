"""Scenario parsing and the command-line runner — run from project root: pytest scripts/test_cli.py"""
import sys, os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from shared import config
from shared.errors import ScenarioError
from cli.main import apply_overrides, main
from cli.scenario import build_options, build_structure, build_theta, parse_scenario, to_matrix

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
SCENARIOS = os.path.join(ROOT, "data", "scenarios")

PAULI_DIRECTIONS = [
    {"V": [[0, 0], [0.35355, 0], [0.35355, 0], [0, 0]], "omega": 0.0, "jstar": 0},
    {"V": [[0.35355, 0], [0, 0], [0, 0], [-0.35355, 0]], "omega": 0.0, "jstar": 1},
]


def write_scenario(tmp_path, payload, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


# ─── Parsing ─────────────────────────────────────────────────────────────────

def test_invalid_json_reports_position():
    with pytest.raises(ScenarioError, match="line 1, column") as exc:
        parse_scenario('{"structure": ', "bad.json")
    assert exc.value.exit_code == 4


def test_schema_error_names_the_field():
    text = json.dumps({"structure": {"kind": "builder", "name": "depolarizing"},
                       "solver": {"grid_n": 0}})
    with pytest.raises(ScenarioError, match=r"solver\.grid_n"):
        parse_scenario(text)


def test_unknown_keys_are_rejected():
    text = json.dumps({"structure": {"kind": "builder", "name": "hypercube", "params": {"n": 2}},
                       "colour": "blue"})
    with pytest.raises(ScenarioError, match="colour"):
        parse_scenario(text)


def test_jstar_must_index_a_direction():
    text = json.dumps({"structure": {"kind": "explicit", "algebra": {"n": 2},
                                     "directions": [dict(PAULI_DIRECTIONS[0], jstar=3)],
                                     "sigma": [[1, 0], [0, 0], [0, 0], [1, 0]]}})
    with pytest.raises(ScenarioError, match="out of range"):
        parse_scenario(text)


def test_nested_matrices_are_normalized():
    nested = [[[1, 0], [0, 0]], [[0, 0], [1, 0]]]
    scn = parse_scenario(json.dumps({
        "structure": {"kind": "builder", "name": "depolarizing"},
        "tasks": [{"command": "evolve", "rho0": nested}],
    }))
    out = scn.normalized()
    assert out["tasks"][0]["rho0"] == [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]
    assert out["solver"]["grid_n"] == 16
    assert_allclose(to_matrix(scn.tasks[0].rho0), np.eye(2))


def test_power_theta_requires_exponent():
    scn = parse_scenario(json.dumps({"structure": {"kind": "builder", "name": "depolarizing"},
                                     "theta": {"kind": "power"}}))
    with pytest.raises(ScenarioError, match="theta.m"):
        build_theta(scn, build_structure(scn))


def test_builder_params_are_checked():
    scn = parse_scenario(json.dumps({"structure": {"kind": "builder", "name": "markov_graph"}}))
    with pytest.raises(ScenarioError, match="'q'"):
        build_structure(scn)


def test_explicit_structure_is_validated():
    with open(os.path.join(SCENARIOS, "explicit_pauli.json"), encoding="utf-8") as f:
        scn = parse_scenario(f.read())
    ds = build_structure(scn)
    assert ds.validated
    assert len(ds.directions) == 3
    assert build_options(scn, allow_nonconvex=True).allow_nonconvex


# ─── Overrides ───────────────────────────────────────────────────────────────

def test_tolerance_override(monkeypatch):
    monkeypatch.setattr(config, "GRID_N", config.GRID_N)
    apply_overrides(["GRID_N=24"])
    assert config.GRID_N == 24


def test_tolerance_override_unknown_key():
    with pytest.raises(ScenarioError, match="unknown key"):
        apply_overrides(["NOT_A_KEY=1"])


# ─── Runner ──────────────────────────────────────────────────────────────────

def test_run_writes_bundle(tmp_path):
    path = write_scenario(tmp_path, {
        "structure": {"kind": "builder", "name": "depolarizing", "params": {"gamma": 1.0}},
        "tasks": [
            {"command": "validate"},
            {"command": "evolve", "rho0": [[1.6, 0], [0, 0], [0, 0], [0.4, 0]], "t_max": 1.0, "steps": 5},
            {"command": "ricci", "samples": 4, "refine": 0},
        ],
        "seed": 3,
    })
    out = tmp_path / "out"
    assert main(["--scenario", path, "--out", str(out)]) == 0
    bundle = json.loads((out / "bundle.json").read_text(encoding="utf-8"))
    assert bundle["seed"] == 3
    assert set(bundle["tasks"]) == {"validate_0", "evolve_1", "ricci_2"}
    ricci = bundle["tasks"]["ricci_2"]
    assert ricci["method"] == "rayleigh-scan"
    assert ricci["certificate"] == 0.0
    assert ricci["lambda_hat"] > 0.5
    assert (out / "evolve_1.csv").exists()
    assert "numpy" in bundle["versions"]


def test_unvalidated_structure_exits_with_two(tmp_path):
    broken = [dict(PAULI_DIRECTIONS[0], omega=0.3), PAULI_DIRECTIONS[1]]
    path = write_scenario(tmp_path, {
        "structure": {"kind": "explicit", "algebra": {"n": 2}, "directions": broken,
                      "sigma": [[1, 0], [0, 0], [0, 0], [1, 0]]},
        "tasks": [{"command": "validate"}, {"command": "ricci", "samples": 2}],
    })
    out = tmp_path / "out"
    assert main(["--scenario", path, "--out", str(out)]) == 2
    assert (out / "validate_0.json").exists()
    assert not (out / "bundle.json").exists()


def test_schema_error_exits_with_four(tmp_path):
    path = write_scenario(tmp_path, {"structure": {"kind": "builder", "name": "nope"}})
    assert main(["--scenario", path]) == 4


def test_dump_normalized(tmp_path, capsys):
    path = os.path.join(SCENARIOS, "fermion_n2.json")
    assert main(["--scenario", path, "--dump-normalized"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["structure"]["name"] == "fermion_ou"


def test_run_transport_commands(tmp_path):
    path = write_scenario(tmp_path, {
        "structure": {"kind": "builder", "name": "depolarizing", "params": {"gamma": 1.0}},
        "solver": {"grid_n": 8},
        "tasks": [
            {"command": "distance", "name": "pair",
             "endpoints": [[[1.6, 0], [0, 0], [0, 0], [0.4, 0]], [[1, 0], [0, 0], [0, 0], [1, 0]]]},
            {"command": "geodesic", "rho0": [[1, 0], [0, 0], [0, 0], [1, 0]],
             "A0": [[0.1, 0], [0, 0], [0, 0], [-0.1, 0]], "T": 0.5, "steps": 20},
            {"command": "inequalities", "samples": 4, "transport_samples": 1},
        ],
        "output": {"prefix": "dep_"},
    })
    out = tmp_path / "out"
    assert main(["--scenario", path, "--out", str(out)]) == 0
    bundle = json.loads((out / "dep_bundle.json").read_text(encoding="utf-8"))
    W = np.array(bundle["tasks"]["pair_0"]["distances"])
    assert_allclose(W, W.T, rtol=1e-6)
    assert W[0, 1] > 0
    assert bundle["tasks"]["geodesic_1"]["energy_drift"] < 1e-4
    assert (out / "dep_pair_0.csv").exists()
    assert set(bundle["tasks"]["inequalities_2"]["constants"]) >= {"ric", "mlsi", "poincare"}
