import math
import warnings

import numpy as np
import pytest
from scipy.special import expit

from itt_bridge.data import RoleConfig, TrialDataset
from itt_bridge.errors import AllStrataDegenerate, ConfigError, DenominatorNearZero, NegativeIncidence, SingularSystem
from itt_bridge.estimators import (EIF_DESIGN, EIF_POSTHOC, EPS_D, NO_CROSSOVER, REG_DESIGN, REG_POSTHOC,
                                   EstimateResult, SensitivityParameter, _kernel, conditional_wald,
                                   counterfactual_placebo_incidence, estimate_difference_in_means,
                                   estimate_itt_eif_design, estimate_itt_g_estimation, estimate_itt_reg_design,
                                   estimate_plan, fit_structural_cate)
from itt_bridge.nuisance import NuisanceFit
from itt_bridge.simulation import ScenarioConfig, gen_scenario, oracle_nuisances, true_itt_oracle

ZERO = SensitivityParameter(0.0)


def _ones(ds):
    return np.ones((1, len(ds)))


@pytest.fixture(scope="module")
def scen():
    cfg = ScenarioConfig(outcome="Y1", c=0.25, n=800, seed=12)
    return cfg, gen_scenario(cfg, 0)


def _zero_residual(ds, nf):
    """Move the nuisance values at fitting rows onto the observations so every residual vanishes."""
    v = {k: a.copy() for k, a in nf.values.items()}
    ratio = np.clip(v["dY_h1"] / v["dD_h1"], -1, 1)
    h1 = ds.s == "h1"
    v["mu_Y0_h1"][0, h1] = ds.y[h1] - (ds.d[h1] - v["mu_D0_h1"][0, h1]) * ratio[0, h1]
    h2 = ds.s == "h2"
    v["mu_D0_h2"][0, h2] = ds.d[h2] - v["dD_h2"][0, h2] * ds.z[h2]
    t1 = (ds.s == "t") & (ds.z == 1)
    v["mu_D1_t"][0, t1] = ds.d[t1]
    return NuisanceFit(v, nf.failed, nf.counts)


def test_eif_with_zero_residuals_is_the_plug_in(scen):
    cfg, ds = scen
    nf = _zero_residual(ds, oracle_nuisances(ds, cfg))
    reg = _kernel(REG_DESIGN, ds, nf, _ones(ds), ZERO, EPS_D)
    eif = _kernel(EIF_DESIGN, ds, nf, _ones(ds), ZERO, EPS_D)
    assert eif.raw[0] == pytest.approx(reg.raw[0], abs=1e-14)
    reg = _kernel(REG_POSTHOC, ds, nf, _ones(ds), SensitivityParameter(0.05), EPS_D)
    eif = _kernel(EIF_POSTHOC, ds, nf, _ones(ds), SensitivityParameter(0.05), EPS_D)
    assert eif.raw[0] == pytest.approx(reg.raw[0], abs=1e-14)


def test_oracle_plug_in_is_consistent():
    # Y1 keeps the true Wald ratio inside [-1, 1], so clamping adds no bias
    cfg = ScenarioConfig(outcome="Y1", c=0.25, n=100, n_target=200_000, seed=1)
    ds = gen_scenario(cfg, 0)
    out = _kernel(REG_DESIGN, ds, oracle_nuisances(ds, cfg), _ones(ds), ZERO, EPS_D)
    truth, _ = true_itt_oracle(cfg)
    t = ds.s == "t"
    vals = out.components["cate"][0, t] * out.components["cc"][0, t]
    assert abs(out.raw[0] - truth) <= 4 * vals.std() / math.sqrt(t.sum())


def test_no_crossover_and_posthoc_differ_by_sensitivity_times_mean_cate(scen):
    cfg, ds = scen
    nf = oracle_nuisances(ds, cfg)
    a = _kernel(NO_CROSSOVER, ds, nf, _ones(ds), ZERO, EPS_D)
    b = _kernel(REG_POSTHOC, ds, nf, _ones(ds), SensitivityParameter(0.1), EPS_D)
    use = a.components["keep"][0] & a.components["target"][0]
    assert a.raw[0] - b.raw[0] == pytest.approx(0.1 * a.components["cate"][0, use].mean(), abs=1e-14)


def test_small_denominators_are_excluded_and_counted(scen):
    cfg, ds = scen
    nf = oracle_nuisances(ds, cfg)
    v = dict(nf.values)
    dD = v["dD_h1"].copy()
    t = np.flatnonzero(ds.s == "t")[:7]
    dD[0, t] = 1e-4
    v["dD_h1"] = dD
    out = _kernel(REG_DESIGN, ds, NuisanceFit(v, nf.failed, nf.counts), _ones(ds), ZERO, EPS_D)
    assert out.excluded[0] == 7 and out.n_used[0] == (ds.s == "t").sum() - 7


def test_no_uptake_contrast_anywhere_is_an_error(scen):
    _, ds = scen
    d = np.where(ds.s == "h1", 0.0, ds.d)   # nobody in the first historical trial takes treatment
    flat = TrialDataset.from_arrays(ds.s, ds.z, d, ds.y, ds.X, ds.config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(AllStrataDegenerate):
            estimate_plan(flat, plan=[REG_DESIGN])


def test_conditional_wald_clamps_and_rejects_small_denominators():
    np.testing.assert_array_equal(conditional_wald([0.2, 0.9, -0.9], [0.5, 0.5, 0.5], None), [0.4, 1.0, -1.0])
    with pytest.raises(DenominatorNearZero):
        conditional_wald([0.1], [1e-4], None)


def test_estimates_are_clamped_and_reproducible(scen):
    _, ds = scen
    a = estimate_itt_reg_design(ds)
    b = estimate_itt_reg_design(ds)
    assert a == b and -1 <= a.point <= 1
    assert a.diagnostics["target_rows_used"] + a.diagnostics["denominator_floor_count"] == (ds.s == "t").sum()


def test_eif_design_interval(scen):
    _, ds = scen
    r = estimate_itt_eif_design(ds, crossfit=2, seed=3)
    assert r.ci[0] < r.point < r.ci[1]
    assert r.ci[1] - r.ci[0] == pytest.approx(2 * 1.959963984540054 * r.se)
    assert r.diagnostics["interval"] == "eif-wald"


def test_difference_in_means_matches_hand_computation():
    s = ["t"] * 8 + ["h1"] * 4 + ["h2"] * 4
    z = [1, 1, 1, 1, 0, 0, 0, 0] + [1, 0] * 4
    y = [1, 1, 1, 0, 1, 0, 0, 0] + [0, 1] * 4
    ds = TrialDataset.from_arrays(s, z, z, y, np.zeros((16, 1)))
    r = estimate_difference_in_means(ds)
    assert r.point == pytest.approx(0.5)
    assert r.se == pytest.approx(math.sqrt(0.75 * 0.25 / 4 + 0.25 * 0.75 / 4))


def _g_data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    z = rng.integers(0, 2, n).astype(float)
    u = rng.random(n)
    d = (u < expit(-1 + 2.5 * z + 0.5 * x)).astype(float)   # uptake confounded with Y(0) through u
    p0 = 0.2 + 0.3 * u
    y = (rng.random(n) < p0 + d * (0.2 + 0.1 * x)).astype(float)
    return TrialDataset.from_arrays(np.repeat("h1", n), z, d, y, x[:, None], RoleConfig("t", "h1", None, "posthoc"))


def test_g_estimation_recovers_linear_cate():
    alpha = fit_structural_cate(_g_data(200_000, 0), "h1")
    np.testing.assert_allclose(alpha, [0.2, 0.1], atol=0.03)


def test_g_estimation_rejects_singular_systems():
    ds = _g_data(200, 1)
    with pytest.raises(SingularSystem):
        fit_structural_cate(ds, "h1", h=lambda X: np.ones((X.shape[0], 2)))


def test_g_estimation_estimator_runs(scen):
    _, ds = scen
    r = estimate_itt_g_estimation(ds)
    assert -1 <= r.point <= 1 and r.diagnostics["target_rows_used"] == (ds.s == "t").sum()


def test_placebo_incidence():
    r = counterfactual_placebo_incidence(1.86, EstimateResult("reg-posthoc", -3.9, 1.0, (-5.0, -2.5)))
    assert r.placebo == pytest.approx(5.76)
    assert r.placebo_ci == pytest.approx((4.36, 6.86))
    with pytest.warns(NegativeIncidence):
        assert counterfactual_placebo_incidence(1.0, 2.0).negative
    with pytest.raises(ConfigError):
        counterfactual_placebo_incidence(-1.0, 0.0)


def test_sensitivity_parameter_validation():
    with pytest.raises(ConfigError):
        SensitivityParameter(1.5)
    f = SensitivityParameter(None, function=lambda X: 0.1 * (X[:, 0] > 0))
    np.testing.assert_array_equal(f.evaluate(np.array([[1.0], [-1.0]])), [0.1, 0.0])
    with pytest.raises(ConfigError):
        SensitivityParameter(None, function=lambda X: np.full(X.shape[0], 2.0)).evaluate(np.zeros((2, 1)))
