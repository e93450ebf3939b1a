import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itt_bridge.data import (SAME_AS_H1, RoleConfig, TrialDataset, load_dataset, split_by_trial, validate_dataset,
                             write_dataset)
from itt_bridge.errors import (ConfigError, EmptyRole, MalformedRow, MissingRequiredColumn, MissingRole,
                               UnknownLabel)


def _csv(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


GOOD = """s,z,d,y,age,site
h1,1,1,0,50.5,a
h1,0,0,1,61,b
h2,1,1,,40,
h2,0,1,,44,a
t,,,,39,b
"""


def test_load_encodes_categoricals_and_missing_level(tmp_path):
    ds = load_dataset(_csv(tmp_path, GOOD), RoleConfig())
    assert ds.columns == ("age", "site")
    assert ds.encoding["site"]["levels"] == ["a", "b", "missing"]
    assert ds.covariate_names == ["age", "site[b]", "site[missing]"]
    np.testing.assert_array_equal(ds.X[:, 1:], [[0, 0], [1, 0], [0, 1], [0, 0], [1, 0]])
    assert np.isnan(ds.y[2]) and np.isnan(ds.z[4])


def test_forced_categorical(tmp_path):
    ds = load_dataset(_csv(tmp_path, GOOD), RoleConfig(), categorical=["age"])
    assert ds.encoding["age"]["type"] == "categorical"
    assert ds.p == 4 + 2


@pytest.mark.parametrize("text,err", [
    ("s,z,d,y\nh1,2,1,0\n", MalformedRow),
    ("s,z,d,y\nh1,1,1\n", MalformedRow),
    ("s,d,y\nh1,1,0\n", MissingRequiredColumn),
    ("s,z,d,y,x\nh1,1,1,0,\n", MalformedRow),
])
def test_malformed_inputs(tmp_path, text, err):
    with pytest.raises(err):
        load_dataset(_csv(tmp_path, text), RoleConfig("t", "h1", None, "posthoc"))


def test_required_columns_per_role(tmp_path):
    # historical1 must carry the outcome
    text = GOOD.replace("h1,0,0,1,61,b", "h1,0,0,,61,b")
    with pytest.raises(MissingRequiredColumn):
        load_dataset(_csv(tmp_path, text), RoleConfig())
    with pytest.raises(EmptyRole):
        load_dataset(_csv(tmp_path, GOOD), RoleConfig(historical2="other"))
    # post hoc targets need assignment and uptake
    with pytest.raises(MissingRequiredColumn):
        load_dataset(_csv(tmp_path, GOOD), RoleConfig("t", "h1", None, "posthoc"))


def test_role_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        RoleConfig("t", "t", "h2")
    with pytest.raises(ConfigError):
        RoleConfig(historical2=None)
    with pytest.raises(ConfigError):
        RoleConfig.from_dict({"target": "t", "bogus": 1})
    p = tmp_path / "r.toml"
    p.write_text('target = "T"\nhistorical1 = "A"\nhistorical2 = "same-as-historical1"\n')
    rc = RoleConfig.from_file(p)
    assert rc.collapsed and rc.h2_label == "A"


def test_split_by_trial(tmp_path):
    ds = load_dataset(_csv(tmp_path, GOOD), RoleConfig())
    parts = split_by_trial(ds)
    assert {k: len(v) for k, v in parts.items()} == {"target": 1, "historical1": 2, "historical2": 2}
    col = ds.with_config(RoleConfig("t", "h1", SAME_AS_H1))
    with pytest.raises(UnknownLabel):
        split_by_trial(col)   # h2 rows are not declared any more
    sub = col.take(np.flatnonzero(col.s != "h2"))
    parts = split_by_trial(sub)
    assert parts["historical2"] is parts["historical1"]


def test_check_roles_missing():
    ds = TrialDataset.from_arrays(["t", "h1"], [1, 0], [1, 0], [0, 1], config=RoleConfig("t", "h1", None, "posthoc"))
    with pytest.raises(MissingRole):
        ds.check_roles(["historical2"])


def test_dataset_is_read_only():
    ds = TrialDataset.from_arrays(["h1"], [1], [1], [0], [[0.5]])
    with pytest.raises(ValueError):
        ds.X[0, 0] = 2.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["t", "h1", "h2"]), st.sampled_from([0.0, 1.0, np.nan]),
                          st.sampled_from([0.0, 1.0, np.nan]), st.sampled_from([0.0, 1.0, np.nan]),
                          st.floats(-1e6, 1e6, allow_nan=False), st.sampled_from(["a", "b c", ""])),
                min_size=1, max_size=30))
def test_write_load_round_trip(tmp_path_factory, rows):
    s, z, d, y, x, _ = map(list, zip(*rows))
    ds = TrialDataset.from_arrays(s, z, d, y, np.array(x)[:, None], columns=("x",))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset(ds, path)
    # arbitrary rows need not satisfy the role checks of load_dataset, so compare the raw cells
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))[1:]
    assert len(got) == len(rows)
    for r, (si, zi, di, yi, xi, _) in zip(got, rows):
        assert r[0] == si and float(r[4]) == xi
        for cell, v in zip(r[1:4], (zi, di, yi)):
            assert cell == ("" if np.isnan(v) else str(int(v)))


def test_validate_dataset_report(tmp_path):
    rng = np.random.default_rng(0)
    n = 300
    s = np.repeat(["t", "h1", "h2"], n)
    X = rng.normal(size=(3 * n, 2)) + np.repeat([[0.0], [0.3], [0.0]], n, axis=0)
    z = rng.integers(0, 2, 3 * n).astype(float)
    ds = TrialDataset.from_arrays(s, z, z, rng.integers(0, 2, 3 * n), X)
    rep = validate_dataset(ds)
    d = rep.to_dict()
    assert set(d) == {"cell_counts", "covariate_summary", "overlap", "warnings"}
    assert sum(sum(v.values()) if isinstance(v, dict) else v for v in d["cell_counts"].values()) == 3 * n


def test_round_trip_through_loader(tmp_path):
    ds = load_dataset(_csv(tmp_path, GOOD), RoleConfig())
    write_dataset(ds, tmp_path / "again.csv")
    back = load_dataset(tmp_path / "again.csv", RoleConfig())
    np.testing.assert_array_equal(back.X, ds.X)
    for a, b in zip(back.records(), ds.records()):
        assert a == b
