import json
import os

import numpy as np
import pytest

from oscidiff import cli, pdesolve as pde

BASE = {
    "field": {"name": "trig1d_st"},
    "p": 0.5,
    "r": 1.0,
    "eps": [0.125, 0.0625],
    "grids": {"M_y": 32, "M_s": 32, "n_x": 128, "n_t": 8, "T": 0.25},
}


def write_config(tmp_path, name="cfg.json", **overrides):
    doc = {**BASE, **overrides}
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run(cmd, cfg_path, out, *extra):
    return cli.main([cmd, "--config", cfg_path, "--out", str(out), *extra])


def test_cell_identity_field_zero_corrector(tmp_path, capsys):
    cfg = write_config(tmp_path, field={"name": "constant"})
    assert run("cell", cfg, tmp_path / "out") == 0
    table = capsys.readouterr().out
    row = table.strip().splitlines()[1].split()
    assert float(row[1]) <= 1e-10  # max |Phi|


def test_nondyadic_eps_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, eps=[1 / 3])
    assert run("converge", cfg, tmp_path / "out") == 1
    assert "not of the form 1/2^m" in capsys.readouterr().err


def test_critical_with_p_one_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, p=1.0, r=2.0)
    assert run("cell", cfg, tmp_path / "out") == 1
    assert "p != 1" in capsys.readouterr().err


def test_unknown_data_builtin_is_config_error(tmp_path):
    cfg = write_config(tmp_path, data={"u0": "gaussian"})
    assert run("cell", cfg, tmp_path / "out") == 1


def test_missing_config_file_is_config_error(tmp_path):
    assert run("cell", str(tmp_path / "nope.json"), tmp_path / "out") == 1


def test_regime_auto_derivation(tmp_path):
    cfg = cli.load_config(write_config(tmp_path, r=3.0))
    assert cfg.regime == "supercritical"
    cfg = cli.load_config(write_config(tmp_path, r=2.0))
    assert cfg.regime == "critical"
    cfg = cli.load_config(write_config(tmp_path, r=1.0))
    assert cfg.regime == "subcritical"


def test_converge_deterministic_and_checked(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("converge", cfg, tmp_path / "a", "--jobs", "1") == 0
    assert run("converge", cfg, tmp_path / "b", "--jobs", "1") == 0
    a = (tmp_path / "a" / "converge.csv").read_bytes()
    b = (tmp_path / "b" / "converge.csv").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "plot.gp").exists()
    assert (tmp_path / "a" / "converge_sol_err.dat").exists()


def test_ahom_json_mirror(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("ahom", cfg, tmp_path / "out", "--json") == 0
    doc = json.loads((tmp_path / "out" / "ahom_summary.json").read_text())
    assert doc["regime"] == "subcritical"
    assert abs(doc["matrices"][0][0][0] - 0.4671) < 1e-3
    assert doc["checks"]["max_asymmetry"] <= 1e-9


def test_micro_homog_write_loadable_trajectories(tmp_path, capsys):
    cfg = write_config(tmp_path, eps=[0.125])
    assert run("micro", cfg, tmp_path / "m") == 0
    assert run("homog", cfg, tmp_path / "h") == 0
    micro = pde.load_traj(str(tmp_path / "m" / "micro_eps2e3.txt"))
    homog = pde.load_traj(str(tmp_path / "h" / "homog.txt"))
    assert micro.values.shape == homog.values.shape
    assert np.max(np.abs(micro.values[-1] - homog.values[-1])) < 0.05


def test_audit_passes(tmp_path, capsys):
    cfg = write_config(tmp_path, eps=[0.125])
    assert run("audit", cfg, tmp_path / "out", "--json") == 0
    doc = json.loads((tmp_path / "out" / "audit_summary.json").read_text())
    assert doc["uniform"]["passed"]
    assert doc["contraction"]["passed"]


def test_config_echo_reruns_identically(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("converge", cfg, tmp_path / "a") == 0
    echo = str(tmp_path / "a" / "config_echo.json")
    assert run("converge", echo, tmp_path / "b") == 0
    assert ((tmp_path / "a" / "converge.csv").read_bytes()
            == (tmp_path / "b" / "converge.csv").read_bytes())


def test_fixture_floor_enforced_via_env(tmp_path, capsys, monkeypatch):
    from conftest import FIXTURE_DIR
    monkeypatch.setenv("OSCIDIFF_FIXTURES", FIXTURE_DIR)
    cfg = write_config(tmp_path)
    assert run("converge", cfg, tmp_path / "out") == 0
