import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itt_bridge.data import TrialDataset
from itt_bridge.errors import ConfigError, DegenerateVariance, EmptyCellInFold, TooManyFailures
from itt_bridge.estimators import REG_DESIGN, estimate_itt_reg_design, estimate_plan, evaluate_plan
from itt_bridge.inference import (THREADS_ENV, BootstrapConfig, CrossfitPlan, bootstrap_ci, bootstrap_indices,
                                  bootstrap_weights, eif_standard_error, eif_variance_ci, make_rng,
                                  percentile_ci, resolve_threads)
from itt_bridge.nuisance import NuisanceSpecs
from itt_bridge.simulation import ScenarioConfig, gen_scenario


@pytest.fixture(scope="module")
def ds():
    return gen_scenario(ScenarioConfig(outcome="Y1", n=300, seed=21), 0)


def test_streams_are_keyed_and_reproducible():
    a = make_rng(5, 1).random(4)
    np.testing.assert_array_equal(a, make_rng(5, 1).random(4))
    assert not np.array_equal(a, make_rng(5, 2).random(4))
    assert not np.array_equal(a, make_rng(6, 1).random(4))


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads(3) == 3
    monkeypatch.setenv(THREADS_ENV, "2")
    assert resolve_threads(7) == 2
    monkeypatch.setenv(THREADS_ENV, "x")
    with pytest.raises(ConfigError):
        resolve_threads()
    monkeypatch.setenv(THREADS_ENV, "0")
    with pytest.raises(ConfigError):
        resolve_threads()


def test_resamples_preserve_trial_sizes(ds):
    cfg = BootstrapConfig(replicates=5, seed=1)
    idx = bootstrap_indices(ds, cfg, 3)
    for lab in ("t", "h1", "h2"):
        assert np.sum(ds.s[idx] == lab) == np.sum(ds.s == lab)
    W = bootstrap_weights(ds, cfg)
    assert W.shape == (5, len(ds))
    np.testing.assert_array_equal(W[3], np.bincount(idx, minlength=len(ds)))


def test_weighted_replicate_equals_refit_on_resampled_rows(ds):
    cfg = BootstrapConfig(replicates=2, seed=9)
    W = bootstrap_weights(ds, cfg)
    outs, _ = evaluate_plan(ds, NuisanceSpecs(), [REG_DESIGN], W=W)
    for b in range(2):
        direct = estimate_itt_reg_design(ds.take(bootstrap_indices(ds, cfg, b)))
        assert outs[REG_DESIGN].point[b] == pytest.approx(direct.point, abs=1e-8)


def test_bootstrap_independent_of_worker_count(ds, monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    cfg = BootstrapConfig(replicates=40, seed=4, chunk=10)
    a = estimate_plan(ds, plan=[REG_DESIGN], bootstrap=cfg, threads=1)[REG_DESIGN]
    b = estimate_plan(ds, plan=[REG_DESIGN], bootstrap=cfg, threads=3)[REG_DESIGN]
    assert (a.point, a.se, a.ci) == (b.point, b.se, b.ci)


def test_generic_bootstrap_and_failure_limit(ds):
    def mean_y(d):
        return float(np.nanmean(d.y))

    r = bootstrap_ci(mean_y, ds, BootstrapConfig(replicates=200, seed=2))
    assert r.ci[0] <= mean_y(ds) <= r.ci[1]
    calls = {"n": 0}

    def flaky(d):
        calls["n"] += 1
        if calls["n"] > 1 and calls["n"] % 5 == 0:
            raise DegenerateVariance("boom")
        return 0.0

    with pytest.raises(TooManyFailures):
        bootstrap_ci(flaky, ds, BootstrapConfig(replicates=20))


def test_percentile_ci():
    assert percentile_ci(np.arange(101.0)) == pytest.approx((2.5, 97.5))


def test_eif_standard_error_formula():
    e = np.array([1.0, -1.0, 2.0, -2.0])
    assert eif_standard_error(e) == pytest.approx(math.sqrt(10 / 16))
    assert eif_standard_error(e, [2, 0, 1, 1]) == pytest.approx(math.sqrt((2 + 4 + 4) / 16))
    with pytest.raises(DegenerateVariance):
        eif_standard_error(np.zeros(3))
    r = eif_variance_ci(e, 0.3)
    assert r.ci == pytest.approx((0.3 - 1.959963984540054 * r.se, 0.3 + 1.959963984540054 * r.se))


def test_crossfit_folds_are_stratified(ds):
    folds = CrossfitPlan(5, seed=1).assign(ds)
    for lab in ("t", "h1", "h2"):
        for z in (0, 1):
            counts = np.bincount(folds[(ds.s == lab) & (ds.z == z)], minlength=5)
            assert counts.max() - counts.min() <= 1
    assert CrossfitPlan(1).assign(ds) is None
    np.testing.assert_array_equal(folds, CrossfitPlan(5, seed=1).assign(ds))


def test_too_many_folds_for_a_cell():
    tiny = TrialDataset.from_arrays(["h1"] * 6, [1, 1, 1, 0, 0, 0], [1, 0, 1, 0, 0, 1], [1, 0, 0, 1, 0, 1],
                                    np.zeros((6, 1)))
    with pytest.raises(EmptyCellInFold):
        CrossfitPlan(5).assign(tiny)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=200), st.floats(0.01, 0.5))
def test_percentile_interval_is_ordered(values, alpha):
    lo, hi = percentile_ci(np.array(values), alpha)
    assert min(values) <= lo <= hi <= max(values)
