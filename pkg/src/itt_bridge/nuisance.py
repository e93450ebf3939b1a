"""Nuisance functions: arm-specific conditional means, their contrasts,
trial participation and treatment assignment probabilities.

Two entry points. ``fit_glm`` / ``fit_delta`` / ``fit_participation`` return
immutable model objects for single analyses. ``fit_nuisance_batch`` fits every
cell an estimator needs against a whole matrix of row weights at once (one row
per bootstrap replicate) and returns predictions at every dataset row, with
optional out-of-fold prediction for cross-fitting.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import glm
from .basis import Basis, build_basis
from .data import HIST1, HIST2, TARGET, TrialDataset
from .errors import (ConfigError, DimensionMismatch, EmptyRole, MissingArm,
                     MissingRequiredColumn, NoConvergence, NonOverlap,
                     SeparationDetected, SingleLabel)

EPS_P = 1e-3
SMOOTHING = 1e-2
LINKS = ("logit", "identity")
BASES = ("linear", "spline")


@dataclass(frozen=True)
class GlmSpec:
    link: str = "logit"
    basis: str = "linear"
    n_knots: int = 4
    max_iterations: int = 50
    tolerance: float = 1e-8
    ridge: float = 1e-8
    smoothing: float = SMOOTHING

    def __post_init__(self):
        if self.link not in LINKS:
            raise ConfigError(f"unknown link {self.link!r}")
        if self.basis not in BASES:
            raise ConfigError(f"unknown basis {self.basis!r}")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")
        if self.ridge < 0 or self.n_knots < 0 or self.smoothing < 0:
            raise ConfigError("ridge, smoothing and n_knots must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "GlmSpec":
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad GLM spec: {exc}") from None

    def build_basis(self, X) -> Basis:
        return build_basis(X, self.basis, self.n_knots)

    def penalty(self, basis: Basis):
        """Ridge on every slope plus ``smoothing`` on the spline-term coefficients."""
        if basis.n_columns == basis.n_linear or self.smoothing == 0:
            return self.ridge
        pen = np.full(basis.n_columns, self.ridge)
        pen[basis.n_linear:] += self.smoothing
        return pen


@dataclass(frozen=True)
class NuisanceSpecs:
    """GLM specs for outcome means, treatment-received means and participation."""

    outcome: GlmSpec = field(default_factory=GlmSpec)
    treatment: GlmSpec = field(default_factory=GlmSpec)
    participation: GlmSpec = field(default_factory=GlmSpec)

    @classmethod
    def linear(cls) -> "NuisanceSpecs":
        return cls()

    @classmethod
    def spline(cls, n_knots: int = 4) -> "NuisanceSpecs":
        g = GlmSpec(basis="spline", n_knots=n_knots)
        return cls(g, g, g)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("outcome", "treatment", "participation")}

    @classmethod
    def from_dict(cls, raw: dict) -> "NuisanceSpecs":
        unknown = set(raw) - {"outcome", "treatment", "participation"}
        if unknown:
            raise ConfigError(f"unknown nuisance spec keys: {sorted(unknown)}")
        return cls(**{k: GlmSpec.from_dict(v) for k, v in raw.items()})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def for_endpoint(self, endpoint: str) -> GlmSpec:
        return self.outcome if endpoint == "Y" else self.treatment


def _clamp_unit(pred: np.ndarray) -> tuple[np.ndarray, int]:
    n_out = int(np.count_nonzero((pred < 0.0) | (pred > 1.0)))
    return np.clip(pred, 0.0, 1.0), n_out


@dataclass(frozen=True)
class ConditionalMeanModel:
    """E[endpoint | X] within one (trial, arm) cell.

    A cell whose endpoint is constant predicts that constant exactly; a logit
    fit for it would have infinite coefficients.
    """

    spec: GlmSpec
    coef: np.ndarray
    basis: Basis
    label: str | None = None
    arm: int | None = None
    endpoint: str = "Y"
    converged: bool = True
    n_iter: int = 0
    score_norm: float = 0.0
    separation: bool = False
    constant: float | None = None

    def predict(self, X) -> np.ndarray:
        return self.predict_counted(X)[0]

    def predict_counted(self, X) -> tuple[np.ndarray, int]:
        """Predictions and how many identity-link D predictions were clamped to [0, 1]."""
        Phi = self.basis.transform(X)
        if self.constant is not None:
            return np.full(Phi.shape[0], self.constant), 0
        eta = Phi @ self.coef
        if self.spec.link == "logit":
            return expit(eta), 0
        if self.endpoint == "D":
            return _clamp_unit(eta)
        return eta, 0

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(), "coef": self.coef.tolist(), "basis": self.basis.to_dict(),
            "label": self.label, "arm": self.arm, "endpoint": self.endpoint,
            "converged": self.converged, "n_iter": self.n_iter, "score_norm": self.score_norm,
            "separation": self.separation, "constant": self.constant,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ConditionalMeanModel":
        raw = dict(raw)
        raw["spec"] = GlmSpec.from_dict(raw["spec"])
        raw["coef"] = np.asarray(raw["coef"], dtype=float)
        raw["basis"] = Basis.from_dict(raw["basis"])
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ConditionalMeanModel":
        return cls.from_dict(json.loads(text))


def _endpoint_values(ds: TrialDataset, endpoint: str) -> np.ndarray:
    if endpoint not in ("Y", "D"):
        raise ConfigError(f"endpoint must be 'Y' or 'D', got {endpoint!r}")
    return ds.y if endpoint == "Y" else ds.d


def _fit_cell(Phi, v, W, spec: GlmSpec, init=None, ridge=None) -> glm.BatchFit:
    ridge = spec.ridge if ridge is None else ridge
    if spec.link == "identity":
        return glm.fit_identity(Phi, v, W, ridge=ridge)
    return glm.fit_logit(Phi, v, W, ridge=ridge, tol=spec.tolerance,
                         max_iter=spec.max_iterations, init=init)


def fit_glm(cell: TrialDataset, endpoint: str, spec: GlmSpec = GlmSpec(), basis: Basis | None = None,
            label: str | None = None, arm: int | None = None) -> ConditionalMeanModel:
    """Fit E[endpoint | X] on all rows of ``cell``.

    Logit fits use Newton-Raphson (IRLS); identity fits are weighted least
    squares. Separation triggers a ridge refit and a ``SeparationDetected``
    warning.
    """
    if len(cell) == 0:
        raise EmptyRole("cannot fit a model on an empty cell")
    v = _endpoint_values(cell, endpoint)
    if np.isnan(v).any():
        raise MissingRequiredColumn(f"endpoint {endpoint} is missing in the fitting cell")
    basis = basis or spec.build_basis(cell.X)
    Phi = basis.transform(cell.X)
    fit = _fit_cell(Phi, v, None, spec, ridge=spec.penalty(basis))
    if label is None and len(set(cell.s.tolist())) == 1:
        label = str(cell.s[0])
    if arm is None and len(set(cell.z.tolist())) == 1 and not np.isnan(cell.z[0]):
        arm = int(cell.z[0])
    if fit.separation[0]:
        warnings.warn(SeparationDetected(
            f"separation in {endpoint} model for trial {label!r}, arm {arm}; ridge fallback applied"))
    if not fit.converged[0]:
        raise NoConvergence(
            f"{endpoint} model for trial {label!r}, arm {arm} did not converge "
            f"(score {fit.score_norm[0]:.3g})")
    constant = float(v.mean()) if fit.degenerate[0] else None
    return ConditionalMeanModel(spec, fit.coef[0], basis, label, arm, endpoint, bool(fit.converged[0]),
                                fit.n_iter, float(fit.score_norm[0]), bool(fit.separation[0]), constant)


@dataclass(frozen=True)
class DeltaFunction:
    """Arm contrast E[endpoint | X, Z=1] - E[endpoint | X, Z=0] within one trial."""

    minuend: ConditionalMeanModel
    subtrahend: ConditionalMeanModel
    endpoint: str = "Y"

    def __post_init__(self):
        a, b = self.minuend, self.subtrahend
        if a.label != b.label or a.endpoint != b.endpoint or a.endpoint != self.endpoint:
            raise ConfigError("delta components must share trial label and endpoint")

    @property
    def label(self):
        return self.minuend.label

    def __call__(self, X) -> np.ndarray:
        return self.minuend.predict(X) - self.subtrahend.predict(X)


def fit_delta(ds: TrialDataset, trial: str, endpoint: str, spec: GlmSpec = GlmSpec(),
              basis: Basis | None = None) -> DeltaFunction:
    """Fit both arm means of ``endpoint`` in trial ``trial`` and pair them."""
    in_trial = ds.s == trial
    models = {}
    for z in (1, 0):
        rows = np.flatnonzero(in_trial & (ds.z == z))
        if rows.size == 0:
            raise MissingArm(f"trial {trial!r} has no rows with Z={z}")
        models[z] = fit_glm(ds.take(rows), endpoint, spec, basis=basis, label=trial, arm=z)
    return DeltaFunction(models[1], models[0], endpoint)


def floor_probs(P: np.ndarray, eps: float = EPS_P) -> np.ndarray:
    """Mix with the uniform distribution so every class has mass >= eps and rows still sum to 1."""
    L = P.shape[-1]
    return eps + (1.0 - L * eps) * P


@dataclass(frozen=True)
class ParticipationModel:
    """Multinomial logit for trial membership; ``labels[0]`` is the reference."""

    labels: list
    coef: np.ndarray            # (L-1, p)
    basis: Basis
    kappa: dict                 # empirical fraction of rows per label
    spec: GlmSpec = GlmSpec()
    converged: bool = True

    def predict_proba(self, X) -> np.ndarray:
        Phi = self.basis.transform(X)
        return floor_probs(glm.softmax_ref(Phi, self.coef[None])[0])

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "coef": self.coef.tolist(), "basis": self.basis.to_dict(),
                "kappa": self.kappa, "spec": self.spec.to_dict(), "converged": self.converged}

    @classmethod
    def from_dict(cls, raw: dict) -> "ParticipationModel":
        return cls(list(raw["labels"]), np.asarray(raw["coef"], dtype=float), Basis.from_dict(raw["basis"]),
                   dict(raw["kappa"]), GlmSpec.from_dict(raw["spec"]), raw["converged"])


def fit_participation(ds: TrialDataset, labels, spec: GlmSpec = GlmSpec(),
                      basis: Basis | None = None) -> ParticipationModel:
    """Fit f(S = s | X) over the rows whose label is in ``labels``."""
    labels = list(dict.fromkeys(labels))
    if len(labels) < 2:
        raise SingleLabel("participation model needs at least two trial labels")
    rows = np.isin(ds.s, labels)
    sub = ds.take(np.flatnonzero(rows))
    cls = np.array([labels.index(s) for s in sub.s])
    for k, lab in enumerate(labels):
        if not np.any(cls == k):
            raise EmptyRole(f"no rows for trial label {lab!r}")
    basis = basis or spec.build_basis(sub.X)
    Phi = basis.transform(sub.X)
    fit = glm.fit_mlogit(Phi, cls, len(labels), ridge=spec.penalty(basis), tol=spec.tolerance,
                         max_iter=spec.max_iterations)
    if not fit.converged[0]:
        raise NoConvergence(f"participation model did not converge (score {fit.score_norm[0]:.3g})")
    kappa = {lab: float(np.mean(cls == k)) for k, lab in enumerate(labels)}
    return ParticipationModel(labels, fit.coef[0], basis, kappa, spec, True)


@dataclass(frozen=True)
class AssignmentModel:
    """f(Z = 1 | X, S).

    ``mode`` is ``"known"`` (per-trial constants, 0.5 unless overridden),
    ``"constant"`` (empirical arm fraction per trial) or ``"logit"`` (per-trial
    logistic regression on the linear basis).
    """

    mode: str = "known"
    probabilities: dict = field(default_factory=dict)
    default: float = 0.5

    def __post_init__(self):
        if self.mode not in ("known", "constant", "logit"):
            raise ConfigError(f"unknown assignment mode {self.mode!r}")
        vals = list(self.probabilities.values()) + [self.default]
        if not all(0.0 < v < 1.0 for v in vals):
            raise ConfigError("assignment probabilities must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "probabilities": dict(self.probabilities), "default": self.default}


def predict(model, X) -> np.ndarray:
    """Evaluate any fitted nuisance model at covariate rows ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    basis = model.minuend.basis if isinstance(model, DeltaFunction) else model.basis
    if X.shape[1] != basis.n_inputs:
        raise DimensionMismatch(f"expected {basis.n_inputs} covariates, got {X.shape[1]}")
    if isinstance(model, ParticipationModel):
        return model.predict_proba(X)
    if isinstance(model, DeltaFunction):
        return model(X)
    return model.predict(X)


# ---------------------------------------------------------------------------
# batched fitting


def key(endpoint: str, z: int, role: str) -> str:
    """Name of a conditional-mean prediction, e.g. ``mu_D1_h2``."""
    return f"mu_{endpoint}{z}_{role}"


ROLE_KEYS = {TARGET: "t", HIST1: "h1", HIST2: "h2"}
ROLE_OF_KEY = {v: k for k, v in ROLE_KEYS.items()}


@dataclass
class NuisanceFit:
    """Predictions of every requested nuisance quantity at every dataset row.

    ``values[name]`` has shape ``(B, n)``, one row per weight vector. Names are
    ``mu_<E><z>_<role>`` for arm means, ``dY_<role>`` / ``dD_<role>`` for arm
    contrasts, ``pS_<role>`` for participation probabilities and ``pZ`` for
    f(Z_i | X_i, S_i) at the observed assignment. In the collapsed design the
    ``h2`` entries are the very same arrays as the ``h1`` entries.
    """

    values: dict
    failed: np.ndarray
    counts: dict
    models: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values


def _cell_rows(ds: TrialDataset, role: str, z: int) -> np.ndarray:
    return ds.role_mask(role) & (ds.z == z)


def _warm_fit(Phi, v, W, spec: GlmSpec, ridge=None):
    """Fit a batch; large batches start from the fit at the mean weights."""
    init = None
    if W.shape[0] > 1 and spec.link == "logit":
        pilot = _fit_cell(Phi, v, W.mean(axis=0), spec, ridge=ridge)
        if pilot.converged[0] and not pilot.degenerate[0]:
            init = pilot.coef[0]
    return _fit_cell(Phi, v, W, spec, init=init, ridge=ridge)


def _predict_batch(fit: glm.BatchFit, Phi, spec: GlmSpec, endpoint: str, W, v):
    eta = fit.coef @ Phi.T
    n_clamped = 0
    if spec.link == "logit":
        pred = expit(eta)
        if fit.degenerate.any():
            ybar = (W[fit.degenerate] @ v) / W[fit.degenerate].sum(axis=1)
            pred[fit.degenerate] = ybar[:, None]
    elif endpoint == "D":
        pred, n_clamped = _clamp_unit(eta)
    else:
        pred = eta
    return pred, n_clamped


def fit_nuisance_batch(ds: TrialDataset, specs: NuisanceSpecs, cells, participation=False,
                       assignment: AssignmentModel | None = None, W=None, folds=None,
                       keep_models: bool = False) -> NuisanceFit:
    """Fit conditional means for ``cells`` (tuples ``(endpoint, z, role)``) and,
    optionally, participation probabilities, under every weight vector in ``W``.

    ``participation`` is False, True (all declared roles) or a list of roles.
    Bases are built once from the pooled covariates so that every cell and
    every replicate shares one design. ``folds`` (an integer array) switches on
    cross-fitting: each row is predicted by models fit without its fold. With
    ``folds=None`` every row is predicted by the full-sample fit.
    """
    n = len(ds)
    W = np.ones((1, n)) if W is None else glm._as_weights(W, n)
    B = W.shape[0]
    if folds is None:
        folds = np.zeros(n, dtype=int)
    folds = np.asarray(folds)
    fold_ids = np.unique(folds)
    collapsed = ds.config.collapsed
    failed = np.zeros(B, bool)
    counts = {"identity_clamped": 0, "separation": 0, "nonconverged": 0}
    values: dict = {}
    models: dict = {}

    designs = {}
    for name in ("outcome", "treatment", "participation"):
        spec = getattr(specs, name)
        basis = spec.build_basis(ds.X)
        designs[name] = (basis, basis.transform(ds.X))

    def track(fit):
        counts["separation"] += int(fit.separation.sum())
        bad = ~fit.converged
        counts["nonconverged"] += int(bad.sum())
        failed[bad] = True

    for endpoint, z, role in cells:
        if role == HIST2 and collapsed:
            continue
        spec = specs.for_endpoint(endpoint)
        basis, Phi = designs["outcome" if endpoint == "Y" else "treatment"]
        v = _endpoint_values(ds, endpoint)
        cell = _cell_rows(ds, role, z)
        if not cell.any():
            raise MissingArm(f"role {role} has no rows with Z={z}")
        if np.isnan(v[cell]).any():
            raise MissingRequiredColumn(f"role {role}, Z={z} rows lack {endpoint}")
        out = np.empty((B, n))
        v_filled = np.where(np.isnan(v), 0.0, v)
        for k in fold_ids:
            train = cell & (folds != k) if fold_ids.size > 1 else cell
            test = folds == k
            rows = np.flatnonzero(train)
            fit = _warm_fit(Phi[rows], v_filled[rows], W[:, rows], spec, spec.penalty(basis))
            track(fit)
            pred, nc = _predict_batch(fit, Phi[test], spec, endpoint, W[:, rows], v_filled[rows])
            counts["identity_clamped"] += nc
            out[:, test] = pred
            if keep_models and B == 1 and fold_ids.size == 1:
                models[key(endpoint, z, ROLE_KEYS[role])] = fit
        values[key(endpoint, z, ROLE_KEYS[role])] = out

    roles_present = [r for r in (TARGET, HIST1, HIST2) if ds.config.roles().get(r) is not None
                     and not (r == HIST2 and collapsed)]
    for endpoint in ("Y", "D"):
        for role in roles_present:
            rk = ROLE_KEYS[role]
            k1, k0 = key(endpoint, 1, rk), key(endpoint, 0, rk)
            if k1 in values and k0 in values:
                values[f"d{endpoint}_{rk}"] = values[k1] - values[k0]
    if collapsed:
        for name in list(values):
            if name.endswith("_h1"):
                values[name[:-3] + "_h2"] = values[name]

    if participation:
        proles = roles_present if participation is True else [r for r in roles_present if r in participation]
        values.update(_participation_batch(ds, specs.participation, *designs["participation"],
                                           proles, W, folds, fold_ids, track))
        if collapsed and "pS_h1" in values:
            values["pS_h2"] = values["pS_h1"]
    values["pZ"] = _assignment_batch(ds, assignment or AssignmentModel(), W, folds, fold_ids, track)
    return NuisanceFit(values, failed, counts, models)


def _participation_batch(ds, spec, basis, Phi, roles, W, folds, fold_ids, track) -> dict:
    labels = [ds.config.roles()[r] for r in roles]
    member = np.isin(ds.s, labels)
    cls = np.full(len(ds), -1)
    for k, lab in enumerate(labels):
        cls[ds.s == lab] = k
    B, n = W.shape
    pen = spec.penalty(basis)
    out = np.empty((len(labels), B, n))
    for k in fold_ids:
        train = member & (folds != k) if fold_ids.size > 1 else member
        test = folds == k
        rows = np.flatnonzero(train)
        Wr = W[:, rows]
        init = None
        if B > 1:
            pilot = glm.fit_mlogit(Phi[rows], cls[rows], len(labels), Wr.mean(axis=0),
                                   ridge=pen, tol=spec.tolerance, max_iter=spec.max_iterations)
            init = pilot.coef[0]
        fit = glm.fit_mlogit(Phi[rows], cls[rows], len(labels), Wr, ridge=pen,
                             tol=spec.tolerance, max_iter=spec.max_iterations, init=init)
        track(fit)
        probs = glm._mlogit_probs(Phi[test], fit.coef)
        for j in range(len(labels)):
            out[j][:, test] = EPS_P + (1.0 - len(labels) * EPS_P) * probs[j]
    return {f"pS_{ROLE_KEYS[r]}": out[j] for j, r in enumerate(roles)}


def _assignment_batch(ds, model: AssignmentModel, W, folds, fold_ids, track) -> np.ndarray:
    """f(Z_i | X_i, S_i) at each row's observed arm, floored at EPS_P. Rows without Z get NaN."""
    B, n = W.shape
    p1 = np.empty((B, n))
    for lab in sorted(set(ds.s.tolist())):
        in_trial = ds.s == lab
        has_z = in_trial & ~np.isnan(ds.z)
        if model.mode == "known":
            p1[:, in_trial] = model.probabilities.get(lab, model.default)
            continue
        z = np.where(np.isnan(ds.z), 0.0, ds.z)
        for k in fold_ids:
            train = has_z & (folds != k) if fold_ids.size > 1 else has_z
            test = in_trial & (folds == k)
            rows = np.flatnonzero(train)
            if rows.size == 0:
                raise MissingArm(f"trial {lab!r} has no assignment data")
            if model.mode == "constant":
                p1[:, test] = ((W[:, rows] @ z[rows]) / W[:, rows].sum(axis=1))[:, None]
            else:
                Phi = np.hstack([np.ones((n, 1)), ds.X])
                fit = _warm_fit(Phi[rows], z[rows], W[:, rows], GlmSpec())
                track(fit)
                p1[:, test] = _predict_batch(fit, Phi[test], GlmSpec(), "Z", W[:, rows], z[rows])[0]
    p1 = np.clip(p1, EPS_P, 1.0 - EPS_P)
    return np.where(ds.z == 1, p1, np.where(ds.z == 0, 1.0 - p1, np.nan))


def check_overlap(ds: TrialDataset, nf: NuisanceFit, threshold: float = 0.5) -> list[str]:
    """Flag trials where more than ``threshold`` of rows sit at the participation floor."""
    flagged = []
    for rk in ("t", "h1", "h2"):
        name = f"pS_{rk}"
        if name not in nf:
            continue
        role = ROLE_OF_KEY[rk]
        mask = ds.role_mask(role)
        if not mask.any():
            continue
        at_floor = nf[name][0, mask] < 2 * EPS_P
        if at_floor.mean() > threshold:
            label = ds.config.roles()[role]
            warnings.warn(NonOverlap(f"participation probability at floor for "
                                     f"{at_floor.mean():.0%} of trial {label!r} rows"))
            flagged.append(label)
    return flagged
