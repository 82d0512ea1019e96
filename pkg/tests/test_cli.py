import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from spreadmpc.cli import EXIT_DOMAIN, EXIT_OK, main
from spreadmpc.network import SpreadingNetwork
from spreadmpc.scenario import Landscape, Wind

from conftest import scalar_network, two_node_network


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _rows(path):
    return list(csv.DictReader(open(path)))


@pytest.fixture
def scalar_files(tmp_path):
    net = tmp_path / "scalar.json"
    scalar_network().save(net)
    return str(net), _write(tmp_path / "x.json", [1.0])


@pytest.fixture
def two_node_files(tmp_path):
    net = tmp_path / "two.json"
    two_node_network().save(net)
    return str(net), _write(tmp_path / "x.json", {"x": [1.0, 0.5]})


@pytest.fixture
def small_landscape(tmp_path):
    land = Landscape(("GGC", "GEG", "DGG"), Wind(2.0, 45.0), seeds=((0, 0),))
    path = tmp_path / "land.json"
    land.save(path)
    return str(path)


def test_validate_generated_instance(tmp_path, capsys):
    assert main(["scenario-gen", "--rows", "6", "--cols", "6", "--out", str(tmp_path)]) == EXIT_OK
    capsys.readouterr()
    assert main(["validate", str(tmp_path / "network.json")]) == EXIT_OK
    out = capsys.readouterr().out
    margin = float(out.split("1 - alpha * rho(A_upper) = ")[1].split()[0])
    assert margin > 0
    assert "admissibility" in out


def test_validate_landscape_file(small_landscape, capsys):
    assert main(["validate", small_landscape]) == EXIT_OK
    assert "PASS stability margin" in capsys.readouterr().out


def test_validate_boundary_margin_fails(tmp_path, capsys):
    # rho(A_upper) = 0.5 for the scalar node, so alpha = 2 sits exactly on the boundary
    d = scalar_network().to_dict()
    d["alpha"] = 2.0
    assert main(["validate", _write(tmp_path / "net.json", d)]) == EXIT_DOMAIN
    assert "FAIL" in capsys.readouterr().out


def test_malformed_json_reports_location(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n": 1,\n "nodes": [}')
    assert main(["validate", str(bad)]) == EXIT_DOMAIN
    err = capsys.readouterr().err
    assert f"{bad}:2:" in err and "invalid JSON" in err


def test_missing_file_and_usage_errors(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nope.json")]) == EXIT_DOMAIN
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == EXIT_DOMAIN
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "x.json", "--steps", "-1"])
    assert exc.value.code == EXIT_DOMAIN


def test_simulate_scalar_risk_is_four_thirds(scalar_files, tmp_path, capsys):
    net, x = scalar_files
    out = tmp_path / "sim"
    assert main(["simulate", net, "--state", x, "--steps", "60", "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "risk.csv")
    assert float(rows[0]["risk"]) == pytest.approx(4 / 3, abs=1e-9)
    assert float(rows[0]["risk_bound"]) == pytest.approx(4 / 3, rel=1e-14)
    # the discounted stage costs of the horizon sum towards the same value
    total = sum(float(r["discounted_cost"]) for r in rows)
    assert total == pytest.approx(4 / 3 * (1 - 0.25 ** 61), rel=1e-12)
    traj = _rows(out / "trajectory.csv")
    assert [float(r["x"]) for r in traj[:3]] == [1.0, 0.5, 0.25]


def test_simulate_two_node_hand_steps(two_node_files, tmp_path):
    net, x = two_node_files
    out = tmp_path / "sim"
    assert main(["simulate", net, "--state", x, "--steps", "2", "--out", str(out)]) == EXIT_OK
    traj = np.array([float(r["x"]) for r in _rows(out / "trajectory.csv")]).reshape(3, 2)
    # x0' = 0.5 x0 and x1' = 0.5 x1 + (1 - x1) 0.4 x0
    np.testing.assert_allclose(traj, [[1.0, 0.5], [0.5, 0.45], [0.25, 0.335]], atol=1e-15)


def test_simulate_zero_state(two_node_files, tmp_path):
    net, _ = two_node_files
    out = tmp_path / "sim"
    x = _write(tmp_path / "zero.json", [0.0, 0.0])
    assert main(["simulate", net, "--state", x, "--steps", "5", "--out", str(out)]) == EXIT_OK
    assert all(float(r["x"]) == 0.0 for r in _rows(out / "trajectory.csv"))
    assert all(float(r["risk"]) == 0.0 for r in _rows(out / "risk.csv"))


def test_simulate_needs_state_for_networks(two_node_files, capsys):
    assert main(["simulate", two_node_files[0]]) == EXIT_DOMAIN
    assert "--state" in capsys.readouterr().err


def test_state_length_mismatch(two_node_files, tmp_path):
    x = _write(tmp_path / "bad.json", [1.0])
    assert main(["simulate", two_node_files[0], "--state", x]) == EXIT_DOMAIN


def test_mpc_zero_steps(small_landscape, tmp_path):
    out = tmp_path / "run"
    assert main(["mpc", small_landscape, "--steps", "0", "--out", str(out), "--quiet"]) == EXIT_OK
    assert (out / "manifest.json").exists()
    assert _rows(out / "run_log.csv") == []
    side = json.loads((out / "run_log.json").read_text())
    assert side["config"]["steps"] == 0


def test_mpc_outputs(small_landscape, tmp_path):
    out = tmp_path / "run"
    argv = ["mpc", small_landscape, "--steps", "3", "--gamma-bar", "0.5", "--L", "2",
            "--out", str(out), "--quiet"]
    assert main(argv) == EXIT_OK
    rows = _rows(out / "run_log.csv")
    assert [int(r["k"]) for r in rows] == [0, 1, 2]
    assert all(float(r["gamma_spent"]) <= 0.5 + 1e-6 for r in rows)
    steps = sorted((out / "allocations").glob("step_*.csv"))
    assert len(steps) == 3
    header = next(csv.reader(open(steps[0])))
    assert header == ["i", "j", "U", "WU"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "mpc" and man["argv"] == argv
    assert man["mpc"]["L"] == 2 and man["mpc"]["gamma_bar"] == 0.5
    assert {"seed", "version", "config_overrides", "tolerances", "inputs"} <= set(man)


def test_mpc_budget_sweep_shares_gamma_m(small_landscape, tmp_path):
    sides = []
    for g in (10, 20, 30):
        out = tmp_path / f"g{g}"
        assert main(["mpc", small_landscape, "--steps", "0", "--gamma-bar", str(g),
                     "--out", str(out), "--quiet"]) == EXIT_OK
        sides.append(json.loads((out / "run_log.json").read_text()))
    gm = sides[0]["Gamma_M"]
    for g, side in zip((10, 20, 30), sides):
        assert side["Gamma_M"] == gm
        assert side["K_estimate"] == math.ceil(gm / g - 1e-9)


def test_mpc_config_file(small_landscape, tmp_path):
    cfg = _write(tmp_path / "cfg.json", {"mpc": {"L": 3, "gamma_bar": 0.2, "steps": 1}})
    out = tmp_path / "run"
    assert main(["mpc", small_landscape, "--config", cfg, "--out", str(out), "--quiet"]) == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_overrides"]["mpc"]["L"] == 3 and man["mpc"]["L"] == 3
    bad = _write(tmp_path / "bad.json", {"mpc": {"horizon": 3}})
    assert main(["mpc", small_landscape, "--config", bad, "--quiet"]) == EXIT_DOMAIN
    assert main(["mpc", small_landscape, "--config", _write(tmp_path / "b2.json", {"x": 1}),
                 "--quiet"]) == EXIT_DOMAIN


def test_gamma_m_two_node(tmp_path, capsys):
    net = tmp_path / "net.json"
    two_node_network(beta=0.6, beta_lower=0.1).save(net)
    out = tmp_path / "gm"
    assert main(["gamma-m", str(net), "--budgets", "0.01", "0.05", "--out", str(out)]) == EXIT_OK
    res = json.loads((out / "gamma_m.json").read_text())
    # the only binding term is the edge: 0.6 e^{-U} + 0.5 <= 1 at U = ln 1.2
    assert res["Gamma_M"] == pytest.approx(math.log(1.2), abs=1e-4)
    assert res["K"] == {"0.01": math.ceil(res["Gamma_M"] / 0.01 - 1e-9),
                        "0.05": math.ceil(res["Gamma_M"] / 0.05 - 1e-9)}
    assert (out / "manifest.json").exists()


def test_gamma_m_admissible_is_zero(tmp_path, capsys):
    net = tmp_path / "net.json"
    two_node_network(beta=0.4).save(net)
    assert main(["gamma-m", str(net)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Gamma_M 0\n" in out
    assert out.count("K = 0") == 3


def test_gamma_m_assumption_violation(tmp_path, capsys):
    net = tmp_path / "net.json"
    two_node_network(beta=0.6, beta_lower=0.1, cost=(1.0, 100.0)).save(net)
    assert main(["gamma-m", str(net)]) == EXIT_DOMAIN
    assert capsys.readouterr().err.startswith("error:")


def test_scenario_gen_outputs(tmp_path):
    out = tmp_path / "gen"
    assert main(["scenario-gen", "--rows", "5", "--cols", "7", "--seed-fraction", "0.2",
                 "--out", str(out)]) == EXIT_OK
    land = Landscape.load(out / "landscape.json")
    assert (land.rows, land.cols) == (5, 7)
    SpreadingNetwork.load(out / "network.json")
    raster = list(csv.reader(open(out / "landscape.csv")))
    assert len(raster) == 6 and all(len(r) == 7 for r in raster)
    x = json.loads((out / "state.json").read_text())["x"]
    assert sum(x) == math.ceil(0.2 * 35)
    grid = np.array(list(csv.reader(open(out / "initial_state.csv")))[1:], dtype=float)
    np.testing.assert_array_equal(grid.ravel(), x)


def test_outputs_are_byte_identical(small_landscape, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["mpc", small_landscape, "--steps", "2", "--gamma-bar", "0.3", "--seed", "4",
                     "--out", str(out), "--quiet"]) == EXIT_OK
        runs.append(out)
    a, b = runs
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in runs)
    ma.pop("output_dir"), mb.pop("output_dir")
    assert ma["argv"][:-2] == mb["argv"][:-2] and ma["seed"] == mb["seed"] == 4


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "spreadmpc.cli", "--version"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert res.stdout.startswith("spreadmpc")
