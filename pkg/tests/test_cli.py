import json
import time

import numpy as np
import pytest

from itt_bridge import cli
from itt_bridge.bounds import bounds_from_data
from itt_bridge.data import RoleConfig, TrialDataset, load_dataset, write_dataset
from itt_bridge.estimators import estimate_itt_eif_design
from itt_bridge.inference import CrossfitPlan
from itt_bridge.simulation import ScenarioConfig, gen_scenario


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_dataset(gen_scenario(ScenarioConfig(outcome="Y1", n=300, seed=8), 0), root / "data.csv")
    (root / "roles.toml").write_text('target = "t"\nhistorical1 = "h1"\nhistorical2 = "h2"\n')
    (root / "posthoc.json").write_text('{"target": "t", "historical1": "h1"}')
    return root


def _run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error(err):
    return json.loads(err.strip().splitlines()[-1])


def test_estimate_report_matches_library(files, capsys):
    code, out, _ = _run(["estimate", "--data", files / "data.csv", "--roles", files / "roles.toml",
                         "--method", "eif", "--crossfit", "3", "--seed", "4"], capsys)
    assert code == 0
    rep = json.loads(out)
    ds = load_dataset(files / "data.csv", RoleConfig())
    lib = estimate_itt_eif_design(ds, crossfit=CrossfitPlan(3, 4), seed=4)
    assert rep["estimate"] == json.loads(lib.to_json())
    m = rep["manifest"]
    assert m["command"] == "estimate" and m["seed"] == 4 and len(m["input_hashes"]["data"]) == 64


def test_bounds_report_matches_library(files, capsys):
    code, out, _ = _run(["bounds", "--data", files / "data.csv", "--roles", files / "roles.toml",
                         "--method", "manski-pepper"], capsys)
    assert code == 0
    ds = load_dataset(files / "data.csv", RoleConfig())
    lib = bounds_from_data(ds, "manski-pepper")
    assert json.loads(out)["bounds"] == json.loads(lib.to_json())


def test_lambda_grid_in_design_mode(files, capsys):
    code, out, _ = _run(["estimate", "--data", files / "data.csv", "--roles", files / "roles.toml",
                         "--sens=-0.1,0,0.1"], capsys)
    rep = json.loads(out)
    scen = rep["sensitivity"]["lambda"]["scenarios"]
    assert code == 0 and len(scen) == 9
    base = rep["estimate"]["point"]
    for s in scen:
        assert s["estimate"]["point"] == pytest.approx(base + s["params"]["lambda1"] * s["params"]["lambda2"])


def test_sensitivity_file(files, capsys, tmp_path):
    grid = tmp_path / "grid.toml"
    grid.write_text("cc_p = [0.0, 0.05]\ncate_scale = [0.5]\n")
    code, out, _ = _run(["estimate", "--data", files / "data.csv", "--roles", files / "posthoc.json",
                         "--mode", "posthoc", "--sens", grid, "--csv", tmp_path / "e.csv"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert [s["label"] for s in rep["sensitivity"]["cc_p"]["scenarios"]] == ["base", "cc_p=0.05"]
    half = rep["sensitivity"]["cate_scale"][0]["estimate"]["point"]
    assert half == pytest.approx(0.5 * rep["estimate"]["point"])
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "scenario,method,point,se,ci_lower,ci_upper"


def test_perfect_compliance_gives_a_point(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n = 400
    s = np.repeat(["h1", "t"], n // 2)
    z = rng.integers(0, 2, n).astype(float)
    y = (rng.random(n) < 0.2 + 0.3 * z).astype(float)
    ds = TrialDataset.from_arrays(s, z, z, y, rng.integers(0, 2, (n, 1)).astype(float))
    write_dataset(ds, tmp_path / "d.csv")
    (tmp_path / "r.json").write_text('{"target": "t", "historical1": "h1"}')
    code, out, _ = _run(["bounds", "--data", tmp_path / "d.csv", "--roles", tmp_path / "r.json"], capsys)
    b = json.loads(out)["bounds"]
    assert code == 0 and b["upper"] - b["lower"] == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("roles,argv,code", [
    ("posthoc.json", ["estimate", "--method", "eif"], "missing_role"),
    ("roles.toml", ["bounds", "--k0", "1", "--k1", "0"], "invalid_bounds"),
    ("posthoc.json", ["estimate", "--mode", "posthoc", "--sens", "0,2"], "config_error"),
    ("roles.toml", ["estimate", "--bogus"], "usage_error"),
])
def test_usage_errors_exit_2(files, capsys, roles, argv, code):
    rc, _, err = _run([*argv, "--data", files / "data.csv", "--roles", files / roles], capsys)
    assert rc == 2
    assert _error(err) == {**_error(err), "error": code, "exit_status": 2}


def test_data_errors_exit_3(tmp_path, files, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("s,z,d,y\nh1,5,1,0\n")
    rc, _, err = _run(["estimate", "--data", bad, "--roles", files / "roles.toml"], capsys)
    assert rc == 3 and _error(err)["error"] == "malformed_row"
    rc, _, err = _run(["estimate", "--data", tmp_path / "nope.csv", "--roles", files / "roles.toml"], capsys)
    assert rc == 3


def test_simulate_smoke_and_errors(tmp_path, capsys):
    scen = tmp_path / "s.toml"
    scen.write_text('outcome = "Y1"\nc = 0.0\nn = 1000\nbootstrap = 0\n'
                    'estimators = ["hypo", "const_1", "const_2", "reg_par", "eif_gam"]\n')
    t0 = time.perf_counter()
    rc, _, _ = _run(["simulate", "--scenario", scen, "--reps", "10", "--seed", "1", "--out-dir", tmp_path / "o"],
                    capsys)
    elapsed = time.perf_counter() - t0
    assert rc == 0 and elapsed < 60
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["config"]["replicates"] == 10 and "manifest" in rep
    lines = (tmp_path / "o" / "replicates.csv").read_text().splitlines()
    assert len(lines) == 1 + 10 * 5

    broken = tmp_path / "broken.toml"
    broken.write_text("outcome = [unterminated\n")
    rc, _, err = _run(["simulate", "--scenario", broken, "--out-dir", tmp_path / "x"], capsys)
    assert rc == 2 and "cannot parse" in _error(err)["message"]
    rc, _, err = _run(["simulate", "--scenario", scen, "--reps", "1", "--out-dir", tmp_path / "y"], capsys)
    assert rc == 2 and _error(err)["error"] == "insufficient_replicates"


def test_threads_env_overrides_flag(files, capsys, monkeypatch):
    argv = ["estimate", "--data", files / "data.csv", "--roles", files / "roles.toml", "--bootstrap", "20"]
    monkeypatch.setenv("ITT_BRIDGE_THREADS", "2")
    _, a, _ = _run([*argv, "--threads", "1"], capsys)
    monkeypatch.setenv("ITT_BRIDGE_THREADS", "1")
    _, b, _ = _run([*argv, "--threads", "4"], capsys)
    assert cli.strip_timing(json.loads(a))["estimate"] == cli.strip_timing(json.loads(b))["estimate"]
