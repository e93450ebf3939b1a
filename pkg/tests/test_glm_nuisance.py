import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from itt_bridge import glm
from itt_bridge.basis import build_basis, rcs_terms
from itt_bridge.data import RoleConfig, TrialDataset
from itt_bridge.errors import DimensionMismatch, SeparationDetected, SingleLabel
from itt_bridge.nuisance import (ConditionalMeanModel, GlmSpec, NuisanceSpecs, fit_delta, fit_glm,
                                 fit_nuisance_batch, fit_participation, predict)


def _logit_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
    y = (rng.random(n) < expit(X @ [0.3, 1.0, -0.5, 0.2])).astype(float)
    return X, y


def _scipy_logit(X, y, w=None):
    w = np.ones(len(y)) if w is None else w

    def nll(b):
        eta = X @ b
        return -np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))) / w.sum()

    def grad(b):
        return -X.T @ (w * (y - expit(X @ b))) / w.sum()

    return minimize(nll, np.zeros(X.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-12}).x


def test_newton_matches_generic_optimizer():
    X, y = _logit_data()
    fit = glm.fit_logit(X, y, ridge=0.0)
    assert fit.converged[0] and not fit.separation[0]
    np.testing.assert_allclose(fit.coef[0], _scipy_logit(X, y), atol=1e-6)


def test_batched_weights_match_individual_fits():
    X, y = _logit_data(seed=1)
    rng = np.random.default_rng(2)
    W = rng.poisson(1.0, size=(4, len(y))).astype(float)
    fit = glm.fit_logit(X, y, W, ridge=0.0)
    for b in range(4):
        np.testing.assert_allclose(fit.coef[b], _scipy_logit(X, y, W[b]), atol=1e-6)


def test_identity_is_least_squares():
    X, _ = _logit_data()
    y = X @ [1.0, 2.0, -1.0, 0.5] + 0.1 * np.random.default_rng(3).normal(size=len(X))
    fit = glm.fit_identity(X, y, ridge=0.0)
    np.testing.assert_allclose(fit.coef[0], np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-10)


def test_mlogit_matches_softmax_likelihood():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(600), rng.normal(size=(600, 2))])
    cls = rng.integers(0, 3, 600)
    fit = glm.fit_mlogit(X, cls, 3, ridge=0.0)
    P = glm.softmax_ref(X, fit.coef)[0]
    onehot = np.eye(3)[cls]
    # first-order conditions of the multinomial likelihood
    np.testing.assert_allclose(X.T @ (onehot - P)[:, 1:], 0.0, atol=1e-7)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)


def test_separation_triggers_ridge_and_warning():
    x = np.linspace(-1, 1, 60)
    cell = TrialDataset.from_arrays(["h1"] * 60, np.ones(60), (x > 0).astype(float), (x > 0).astype(float), x[:, None])
    with pytest.warns(SeparationDetected):
        m = fit_glm(cell, "Y")
    assert m.separation and np.all(np.isfinite(m.coef))
    p = m.predict(x[:, None])
    assert np.all(p[x > 0.5] > 0.5) and np.all(p[x < -0.5] < 0.5)


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_constant_endpoint_predicts_constant(value):
    n = 40
    X = np.random.default_rng(5).normal(size=(n, 2))
    cell = TrialDataset.from_arrays(["h1"] * n, np.ones(n), np.full(n, value), np.full(n, value), X)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = fit_glm(cell, "D")
    assert m.constant == value
    np.testing.assert_array_equal(m.predict(X), value)


def test_perfect_compliance_gives_unit_uptake_contrast():
    rng = np.random.default_rng(6)
    n = 200
    z = np.repeat([1.0, 0.0], n // 2)
    ds = TrialDataset.from_arrays(["h1"] * n, z, z, rng.integers(0, 2, n), rng.normal(size=(n, 2)))
    delta = fit_delta(ds, "h1", "D")
    np.testing.assert_array_equal(delta(rng.normal(size=(10, 2))), 1.0)


def test_spline_with_zero_knots_is_linear():
    rng = np.random.default_rng(7)
    n = 300
    X = rng.normal(size=(n, 3))
    y = (rng.random(n) < expit(X[:, 0])).astype(float)
    cell = TrialDataset.from_arrays(["h1"] * n, np.ones(n), y, y, X)
    a = fit_glm(cell, "Y", GlmSpec())
    b = fit_glm(cell, "Y", GlmSpec(basis="spline", n_knots=0))
    np.testing.assert_array_equal(a.coef, b.coef)


def test_restricted_cubic_spline_is_linear_beyond_boundary_knots():
    knots = np.array([-1.0, -0.2, 0.3, 1.0])
    x = np.linspace(1.5, 4.0, 6)
    second = np.diff(rcs_terms(x, knots), n=2, axis=0)
    np.testing.assert_allclose(second, 0.0, atol=1e-12)
    np.testing.assert_array_equal(rcs_terms(np.array([-3.0, -1.0]), knots), 0.0)


def test_basis_keeps_binary_columns_linear():
    rng = np.random.default_rng(8)
    X = np.column_stack([rng.normal(size=100), rng.integers(0, 2, 100)])
    b = build_basis(X, "spline", 4)
    # four interior knots plus the two boundary knots
    assert b.knots[1] is None and len(b.knots[0]) == 6
    assert b.n_columns == 1 + 2 + 4


def test_predict_checks_dimension_and_round_trips():
    X, y = _logit_data(n=200)
    cell = TrialDataset.from_arrays(["h1"] * 200, np.ones(200), y, y, X[:, 1:])
    m = fit_glm(cell, "Y")
    with pytest.raises(DimensionMismatch):
        predict(m, np.zeros((2, 5)))
    back = ConditionalMeanModel.from_json(m.to_json())
    np.testing.assert_array_equal(predict(back, X[:5, 1:]), predict(m, X[:5, 1:]))
    np.testing.assert_allclose(predict(m, X[:5, 1:]), expit(X[:5] @ m.coef))


def test_participation_probabilities():
    rng = np.random.default_rng(9)
    n = 900
    s = np.repeat(["t", "h1", "h2"], n // 3)
    X = rng.normal(size=(n, 1)) + np.repeat([0.0, 0.5, -0.5], n // 3)[:, None]
    ds = TrialDataset.from_arrays(s, np.zeros(n), None, None, X)
    m = fit_participation(ds, ["t", "h1", "h2"])
    P = predict(m, X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert P.min() >= 1e-3
    # MLE with intercept reproduces the label shares
    np.testing.assert_allclose(P.mean(axis=0), 1 / 3, atol=2e-3)
    assert m.kappa == {"t": 1 / 3, "h1": 1 / 3, "h2": 1 / 3}
    with pytest.raises(SingleLabel):
        fit_participation(ds, ["t", "t"])


def test_batch_full_fit_matches_single_cell_fit():
    rng = np.random.default_rng(10)
    n = 600
    s = np.repeat(["t", "h1", "h2"], n // 3)
    z = rng.integers(0, 2, n).astype(float)
    X = rng.normal(size=(n, 2))
    d = (rng.random(n) < expit(X[:, 0] + z)).astype(float)
    y = (rng.random(n) < expit(X[:, 1] - z)).astype(float)
    ds = TrialDataset.from_arrays(s, z, d, y, X, RoleConfig())
    nf = fit_nuisance_batch(ds, NuisanceSpecs(), [("Y", 1, "historical1"), ("D", 0, "historical2")])
    rows = np.flatnonzero((s == "h1") & (z == 1))
    m = fit_glm(ds.take(rows), "Y", basis=build_basis(X))
    np.testing.assert_allclose(nf["mu_Y1_h1"][0], m.predict(X), atol=1e-8)
    assert nf["mu_D0_h2"].shape == (1, n)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(30, 120))
def test_logit_predictions_in_unit_interval(seed, n):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = rng.integers(0, 2, n).astype(float)
    fit = glm.fit_logit(X, y)
    p = expit(X @ fit.coef[0])
    assert np.all((p >= 0) & (p <= 1)) and np.all(np.isfinite(fit.coef))
