import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from lorflow.cli import main
from lorflow.flow import ConfigError
from lorflow.grid import Grid, read_field_csv
from lorflow.harness import (
    PRESETS,
    RunReport,
    Scenario,
    ScenarioError,
    _threads,
    minimization_check,
    preset,
    run_scenario,
    winding_number,
    write_ledger,
)
from lorflow.elliptic import EllipticOperator
from lorflow.target import CliffordTorus


@pytest.mark.parametrize("name", PRESETS)
def test_presets_build_and_round_trip(name):
    s = preset(name)
    back = Scenario.from_dict(json.loads(json.dumps(s.to_dict())))
    assert back == s
    prob = s.build(17)
    assert prob.grid.n == 17
    cfg = s.flow_config({"n": 17})
    assert cfg.n == 17


def test_unknown_inputs_rejected():
    with pytest.raises(ScenarioError):
        preset("nope")
    d = preset("small_energy").to_dict()
    d["colour"] = "red"
    with pytest.raises(ScenarioError):
        Scenario.from_dict(d)
    with pytest.raises(ConfigError):
        preset("small_energy").flow_config({"tau_factor": 0.3})
    bad = preset("npc_torus")
    bad.target = "sphere2"
    with pytest.raises(ScenarioError):
        bad.build(9)


def test_winding_number_of_torus_boundary():
    T = CliffordTorus()
    g = Grid(33)
    X, Y = g.mesh()
    for k in (0, 1, 2):
        u = T.from_angles(2 * np.pi * k * X, 0.3 * Y)
        assert winding_number(u) == pytest.approx(k, abs=1e-12)


def test_minimization_check_detects_non_minimiser():
    g = Grid(17)
    op = EllipticOperator.from_beta(g, np.ones((17, 17)))
    X, Y = g.mesh()
    v, _ = op.solve(X * Y, 1e-12)
    assert minimization_check(op, v)["passed"]
    w = v.copy()
    w[8, 8] += 0.1
    assert not minimization_check(op, w)["passed"]


def test_ledger_floats_round_trip(tmp_path):
    row = {"step": 3, "t": 0.1, "E_u": 1 / 3, "E_v": 2.0 ** -40, "Q_beta": 1e-300, "E_g": -0.1,
           "ut_norm_sq": 0.0, "max_grad": 7.0, "wp4_ratio": 1.0, "elliptic_iters": 12}
    p = write_ledger(tmp_path / "l.csv", [row])
    header, line = p.read_text().splitlines()
    vals = dict(zip(header.split(","), line.split(",")))
    assert float(vals["E_u"]) == 1 / 3 and float(vals["Q_beta"]) == 1e-300 and vals["step"] == "3"


def test_beta_const_run_writes_artifacts(tmp_path):
    rep = run_scenario(preset("beta_const_validation"), tmp_path, {"n": 17, "t_max": 0.02})
    assert rep.passed, {k: c for k, c in rep.checks.items() if not c["passed"]}
    assert rep.termination == "converged"
    assert set(RunReport.REQUIRED) <= set(rep.checks)
    assert rep.checks["decoupling"]["passed"]
    d = json.loads((tmp_path / "report.json").read_text())
    assert d["passed"] and d["termination"] == "converged" and d["missing_checks"] == []
    lines = (tmp_path / "ledger.csv").read_text().splitlines()
    assert lines[0] == "step,t,E_u,E_v,Q_beta,E_g,ut_norm_sq,max_grad,wp4_ratio,elliptic_iters"
    snaps = sorted((tmp_path / "snapshots").glob("*_u.csv"))
    assert snaps
    _, meta = read_field_csv(snaps[-1])
    assert meta["n"] == 17 and meta["K"] == 3


def test_small_energy_coarse(tmp_path):
    rep = run_scenario(preset("small_energy"), tmp_path, {"n": 17})
    assert rep.termination == "converged"
    assert rep.passed, {k: c for k, c in rep.checks.items() if not c["passed"]}


def test_npc_torus_coarse(tmp_path):
    rep = run_scenario(preset("npc_torus"), tmp_path, {"n": 17})
    assert rep.termination == "converged"
    assert rep.checks["winding_number"]["passed"]
    assert rep.checks["tension_residual"]["passed"]


def test_expected_mismatch_fails(tmp_path):
    s = preset("beta_const_validation")
    s.expected = "t_max"
    rep = run_scenario(s, tmp_path, {"n": 9, "t_max": 0.01})
    assert not rep.passed and rep.exit_code == 1
    assert not rep.checks["termination"]["passed"]


def test_threads_env(monkeypatch):
    monkeypatch.setenv("LORFLOW_THREADS", "1")
    assert _threads() == 1
    monkeypatch.setenv("LORFLOW_THREADS", "many")
    with pytest.raises(ConfigError):
        _threads()


def test_cli_preset_and_config(tmp_path):
    r = CliRunner().invoke(main, ["preset", "beta_const_validation", "--out", str(tmp_path / "a"), "--n", "9"])
    assert r.exit_code == 0, r.output
    assert "PASS decoupling" in r.output
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "beta_const_validation", "config": {"n": 9, "tau_factor": 0.3}}))
    r = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert r.exit_code == 2 and "tau_factor" in r.output
    assert not (tmp_path / "b" / "ledger.csv").exists()
    cfg.write_text(json.dumps({"scenario": preset("beta_const_validation").to_dict(), "config": {"n": 9}}))
    r = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out", str(tmp_path / "c")])
    assert r.exit_code == 0, r.output
    cfg.write_text(json.dumps({"preset": "small_energy", "scenario": {}}))
    r = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out", str(tmp_path / "d")])
    assert r.exit_code == 2


def test_cli_bubble_on_synthetic_snapshot(tmp_path):
    from lorflow.diagnostics import glued_bubble
    from lorflow.grid import write_field_csv

    g = Grid(129)
    p = write_field_csv(tmp_path / "snap_00000_u.csv", glued_bubble(g, (0.5, 0.5), 0.05), header="n=129 K=3 t=0 step=0")
    r = CliRunner().invoke(main, ["bubble", "--snapshot", str(p), "--epsilon1", "4", "--out", str(tmp_path / "o")])
    assert r.exit_code == 0, r.output
    d = json.loads((tmp_path / "o" / "bubble.json").read_text())
    assert d["verdict"]["passed"]
    assert abs(d["bubble"]["stats"]["E_bubble"] - 4 * math.pi) < 0.2 * 4 * math.pi
    r = CliRunner().invoke(main, ["bubble", "--snapshot", str(p), "--epsilon1", "100", "--out", str(tmp_path / "q")])
    assert r.exit_code == 1 and "no_concentration" in r.output
