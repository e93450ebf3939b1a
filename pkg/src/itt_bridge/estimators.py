"""Point estimators of the target-trial ITT effect and related quantities.

Every estimator is a per-row expression in fitted nuisance predictions,
averaged over target rows. The expressions are written for prediction arrays
of shape ``(B, n)`` with row weights ``W`` of the same shape, so a single fit
(``B = 1``, unit weights) and a whole bootstrap batch go through the same code.

Rows where the first historical trial's compliance contrast is below
``EPS_D`` in magnitude are dropped from every average and counted. Per-row
conditional Wald ratios are clamped to [-1, 1] and counted; point estimates
are clamped to [-1, 1] as well.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import HIST1, HIST2, TARGET, TrialDataset
from .errors import (AllStrataDegenerate, ConfigError, DenominatorNearZero, IttBridgeError, MissingRole,
                     NegativeIncidence, SingularSystem)
from .inference import (BootstrapConfig, CrossfitPlan, batched_bootstrap, bootstrap_result,
                        eif_variance_ci)
from .nuisance import AssignmentModel, NuisanceSpecs, check_overlap, fit_nuisance_batch
from .results import EstimateResult, clamp_estimate

EPS_D = 1e-3

REG_DESIGN = "reg-design"
EIF_DESIGN = "eif-design"
REG_POSTHOC = "reg-posthoc"
EIF_POSTHOC = "eif-posthoc"
CONSTANCY_1 = "constancy-1"
CONSTANCY_2 = "constancy-2"
NO_CROSSOVER = "no-crossover"
G_ESTIMATION = "g-estimation"
DIFF_IN_MEANS = "difference-in-means"
METHODS = (REG_DESIGN, EIF_DESIGN, REG_POSTHOC, EIF_POSTHOC, CONSTANCY_1, CONSTANCY_2,
           NO_CROSSOVER, G_ESTIMATION, DIFF_IN_MEANS)
EIF_METHODS = (EIF_DESIGN, EIF_POSTHOC)
POSTHOC_METHODS = (REG_POSTHOC, EIF_POSTHOC)


@dataclass(frozen=True)
class SensitivityParameter:
    """Assumed placebo-arm uptake mu*_{D,0}(X; t): a constant or a function of X."""

    value: float | None = 0.0
    function: object = field(default=None, compare=False)
    name: str | None = None

    def __post_init__(self):
        if self.function is None and not (self.value is not None and 0.0 <= self.value <= 1.0):
            raise ConfigError(f"sensitivity constant must lie in [0, 1], got {self.value}")

    def evaluate(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.function is None:
            return np.full(X.shape[0], float(self.value))
        v = np.asarray(self.function(X), dtype=float).reshape(X.shape[0])
        if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
            raise ConfigError("sensitivity function must return values in [0, 1]")
        return v

    @property
    def label(self) -> str:
        if self.name is not None:
            return self.name
        return f"{self.value:g}" if self.function is None else "function"

    def to_dict(self) -> dict:
        return {"value": self.value, "label": self.label} if self.function is None else {"label": self.label}


def conditional_wald(delta_y, delta_d, X, eps_d: float = EPS_D) -> np.ndarray:
    """delta_Y(X) / delta_D(X) clamped to [-1, 1].

    Raises ``DenominatorNearZero`` if any |delta_D(X)| is below ``eps_d``.
    """
    X = np.asarray(X, dtype=float)
    dy = delta_y(X) if callable(delta_y) else np.asarray(delta_y, dtype=float)
    dd = delta_d(X) if callable(delta_d) else np.asarray(delta_d, dtype=float)
    if np.any(np.abs(dd) < eps_d):
        raise DenominatorNearZero(f"|delta_D| below {eps_d} at {int(np.sum(np.abs(dd) < eps_d))} rows")
    return np.clip(dy / dd, -1.0, 1.0)


def _wald(dY, dD, eps_d):
    """Clamped ratio, usable-row mask and clamp mask for (B, n) arrays."""
    keep = np.abs(dD) >= eps_d
    raw = dY / np.where(keep, dD, 1.0)
    ratio = np.clip(raw, -1.0, 1.0)
    return ratio, keep, keep & (ratio != raw)


@dataclass
class KernelOut:
    raw: np.ndarray                   # (B,) before clamping to [-1, 1]
    n_used: np.ndarray                # (B,) weighted count of target rows averaged
    excluded: np.ndarray              # (B,) target rows dropped for |delta_D| < EPS_D
    clamped: np.ndarray               # (B,) target rows whose Wald ratio was clamped
    eif: np.ndarray | None = None     # (B, n) influence-function values
    components: dict | None = None    # per-row factors (B = 1 only)

    @property
    def point(self) -> np.ndarray:
        return np.where(np.isfinite(self.raw), np.clip(self.raw, -1.0, 1.0), np.nan)


def _target_average(term, keep, tmask, W, clamped=None) -> KernelOut:
    w = W * tmask * keep
    n_used = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = (W * np.where(keep & tmask, term, 0.0)).sum(axis=1) / n_used
    raw = np.where(n_used > 0, raw, np.nan)
    excluded = (W * tmask * ~keep).sum(axis=1)
    nclamp = np.zeros_like(n_used) if clamped is None else (W * tmask * clamped).sum(axis=1)
    return KernelOut(raw, n_used, excluded, nclamp)


def _product(nf, eps_d):
    """Per-row CATE(X; h1) * CC(X; h2) with masks.

    When the two historical trials coincide the product is delta_Y(X; h1)
    itself and no division is made.
    """
    dY, dD1, dD2 = nf["dY_h1"], nf["dD_h1"], nf["dD_h2"]
    if dD2 is dD1:
        ones = np.ones(dY.shape, bool)
        return dY, dY, np.ones_like(dY), ones, ~ones
    ratio, keep, clamped = _wald(dY, dD1, eps_d)
    return ratio * dD2, ratio, dD2, keep, clamped


def _posthoc_cc(ds, nf, sens: SensitivityParameter):
    return nf["mu_D1_t"] - sens.evaluate(ds.X)[None, :]


def _zero_filled(v):
    return np.where(np.isnan(v), 0.0, v)


def _kernel(method, ds: TrialDataset, nf, W, sens, eps_d) -> KernelOut:
    tmask = ds.role_mask(TARGET)[None, :]
    if method == REG_DESIGN:
        term, cate, cc, keep, clamped = _product(nf, eps_d)
        out = _target_average(term, keep, tmask, W, clamped)
        out.components = {"cate": cate, "cc": cc, "keep": keep, "target": tmask}
        return out
    if method in (REG_POSTHOC, NO_CROSSOVER):
        cate, keep, clamped = _wald(nf["dY_h1"], nf["dD_h1"], eps_d)
        cc = nf["mu_D1_t"] if method == NO_CROSSOVER else _posthoc_cc(ds, nf, sens)
        out = _target_average(cate * cc, keep, tmask, W, clamped)
        out.components = {"cate": cate, "cc": cc, "keep": keep, "target": tmask}
        return out
    if method in (CONSTANCY_1, CONSTANCY_2):
        dY = nf["dY_h1" if method == CONSTANCY_1 else "dY_h2"]
        return _target_average(dY, np.ones(dY.shape, bool), tmask, W)
    if method in EIF_METHODS:
        return _eif_kernel(method, ds, nf, W, sens, eps_d, tmask)
    raise ConfigError(f"unknown method {method!r}")


def _eif_kernel(method, ds, nf, W, sens, eps_d, tmask) -> KernelOut:
    y, d, z = _zero_filled(ds.y), _zero_filled(ds.d), _zero_filled(ds.z)
    in_h1 = ds.role_mask(HIST1)[None, :]
    ratio, keep, clamped = _wald(nf["dY_h1"], nf["dD_h1"], eps_d)
    dD1 = np.where(keep, nf["dD_h1"], 1.0)
    ipw = np.where(np.isnan(nf["pZ"]), 0.0, 1.0 / np.where(np.isnan(nf["pZ"]), 1.0, nf["pZ"]))
    sign = 2.0 * z - 1.0
    pS_t = nf["pS_t"]

    if method == EIF_DESIGN:
        cc = nf["dD_h2"]
        in_h2 = ds.role_mask(HIST2) if ds.config.h2_label is not None else np.zeros(len(ds), bool)
        in_h2 = in_h2[None, :]
        second = in_h2 * sign * ipw * (pS_t / nf["pS_h2"]) * ratio * (d - nf["mu_D0_h2"] - cc * z)
    else:
        cc = _posthoc_cc(ds, nf, sens)
        second = tmask * (z == 1) * ipw * ratio * (d - nf["mu_D1_t"])
    resid_h1 = y - nf["mu_Y0_h1"] - (d - nf["mu_D0_h1"]) * ratio
    first = in_h1 * sign * ipw * (pS_t / nf["pS_h1"]) * (cc / dD1) * resid_h1
    plug = ratio * cc

    body = np.where(keep, first + second, 0.0)
    used = W * tmask * keep
    n_used = used.sum(axis=1)
    total = (W * body).sum(axis=1) + (used * np.where(keep, plug, 0.0)).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.where(n_used > 0, total / n_used, np.nan)
        n_all = W.sum(axis=1)
        scale = (n_all / n_used)[:, None]
        eif = scale * (body + tmask * keep * (np.where(keep, plug, 0.0) - raw[:, None]))
    out = KernelOut(raw, n_used, (W * tmask * ~keep).sum(axis=1), (W * tmask * clamped).sum(axis=1), eif)
    out.components = {"cate": ratio, "cc": cc, "keep": keep, "target": tmask}
    return out


def influence_values(ds: TrialDataset, nf, psi: float | None = None, method: str = EIF_DESIGN,
                     sens: SensitivityParameter | None = None, eps_d: float = EPS_D) -> np.ndarray:
    """Estimated EIF of every row from fitted (or oracle) nuisances ``nf``.

    With ``psi`` the EIF is centred at that value instead of the estimate, so
    its sample mean is ``estimate - psi``.
    """
    if method not in EIF_METHODS:
        raise ConfigError(f"{method} has no influence-function form here")
    W = np.ones((1, len(ds)))
    tmask = ds.role_mask(TARGET)[None, :]
    out = _eif_kernel(method, ds, nf, W, sens or SensitivityParameter(0.0), eps_d, tmask)
    eif = out.eif[0]
    if psi is not None:
        keep = out.components["keep"][0]
        eif = eif + (len(ds) / out.n_used[0]) * (tmask[0] & keep) * (out.raw[0] - psi)
    return eif


def _diff_in_means(ds: TrialDataset, W) -> KernelOut:
    t = ds.role_mask(TARGET)
    if np.isnan(ds.y[t]).any() or np.isnan(ds.z[t]).any():
        raise MissingRole("difference in means needs Y and Z on every target row")
    y = _zero_filled(ds.y)
    a1 = W * (t & (ds.z == 1))
    a0 = W * (t & (ds.z == 0))
    n1, n0 = a1.sum(axis=1), a0.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        m1, m0 = (a1 @ y) / n1, (a0 @ y) / n0
    raw = m1 - m0
    out = KernelOut(raw, n1 + n0, np.zeros_like(raw), np.zeros_like(raw))
    out.components = {"se": np.sqrt(m1 * (1 - m1) / n1 + m0 * (1 - m0) / n0)}
    return out


# ---------------------------------------------------------------------------
# plans: several estimators sharing one set of nuisance fits


def plan_requirements(ds: TrialDataset, methods) -> tuple[list, object]:
    """Cells ``(endpoint, z, role)`` and participation roles the methods need.

    Raises ``MissingRole`` when a method needs a role the dataset lacks.
    """
    cfg = ds.config
    has_h2 = cfg.h2_label is not None
    cells: list = []
    participation: list = []

    def need(*items):
        for it in items:
            if it not in cells:
                cells.append(it)

    h1_cells = [("Y", 0, HIST1), ("Y", 1, HIST1), ("D", 0, HIST1), ("D", 1, HIST1)]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if m in (REG_DESIGN, EIF_DESIGN):
            if not has_h2:
                raise MissingRole(f"{m} needs a second historical trial (or same-as-historical1)")
            need(*h1_cells, ("D", 0, HIST2), ("D", 1, HIST2))
            if m == EIF_DESIGN:
                participation = [TARGET, HIST1, HIST2]
        elif m in (REG_POSTHOC, EIF_POSTHOC, NO_CROSSOVER):
            t = ds.role_mask(TARGET)
            if np.isnan(ds.z[t]).any() or np.isnan(ds.d[t]).any() or not np.any(ds.z[t] == 1):
                raise MissingRole(f"{m} needs Z and D on target rows, with a Z=1 arm")
            need(*h1_cells, ("D", 1, TARGET))
            if m == EIF_POSTHOC and not participation:
                participation = [TARGET, HIST1]
        elif m == CONSTANCY_1:
            need(("Y", 0, HIST1), ("Y", 1, HIST1))
        elif m == CONSTANCY_2:
            if not has_h2:
                raise MissingRole("constancy-2 needs a second historical trial")
            need(("Y", 0, HIST2), ("Y", 1, HIST2))
        elif m == G_ESTIMATION:
            if not has_h2:
                raise MissingRole("g-estimation ITT needs a second historical trial")
            need(("D", 0, HIST2), ("D", 1, HIST2))
    return cells, participation or False


@dataclass(frozen=True)
class PlanEntry:
    name: str
    method: str
    sens: SensitivityParameter | None = None


def _as_plan(entries) -> list[PlanEntry]:
    out = []
    for e in entries:
        if isinstance(e, PlanEntry):
            out.append(e)
        elif isinstance(e, str):
            out.append(PlanEntry(e, e))
        else:
            out.append(PlanEntry(*e))
    names = [e.name for e in out]
    if len(set(names)) != len(names):
        raise ConfigError("plan entry names must be unique")
    return out


def evaluate_plan(ds: TrialDataset, specs: NuisanceSpecs, plan, assignment: AssignmentModel | None = None,
                  folds=None, W=None, eps_d: float = EPS_D):
    """Fit the union of nuisances the plan needs once and evaluate every entry.

    Returns ``({name: KernelOut}, NuisanceFit)``.
    """
    plan = _as_plan(plan)
    n = len(ds)
    W = np.ones((1, n)) if W is None else np.atleast_2d(np.asarray(W, dtype=float))
    cells, participation = plan_requirements(ds, [e.method for e in plan])
    nf = None
    if cells or participation:
        nf = fit_nuisance_batch(ds, specs, cells, participation=participation, assignment=assignment,
                                W=W, folds=folds)
    outs = {}
    for e in plan:
        if e.method == DIFF_IN_MEANS:
            outs[e.name] = _diff_in_means(ds, W)
            continue
        if e.method == G_ESTIMATION:
            outs[e.name] = _g_kernel(ds, nf, W, assignment or AssignmentModel())
            continue
        sens = e.sens if e.sens is not None else SensitivityParameter(0.0)
        out = _kernel(e.method, ds, nf, W, sens, eps_d)
        out.raw = np.where(nf.failed, np.nan, out.raw)
        outs[e.name] = out
    return outs, nf


def _replicate_points(ds, W, specs, plan, assignment, folds, eps_d):
    outs, _ = evaluate_plan(ds, specs, plan, assignment, folds, W, eps_d)
    return {name: o.point for name, o in outs.items()}


class _ReplicateFn:
    """Picklable closure handed to the batched bootstrap."""

    def __init__(self, specs, plan, assignment, folds, eps_d):
        self.args = (specs, plan, assignment, folds, eps_d)

    def __call__(self, ds, W):
        try:
            return _replicate_points(ds, W, *self.args)
        except (IttBridgeError, np.linalg.LinAlgError, FloatingPointError):
            return {}  # the whole chunk counts as failed replicates


def estimate_plan(ds: TrialDataset, specs: NuisanceSpecs | None = None, plan=(REG_DESIGN,),
                  assignment: AssignmentModel | None = None, crossfit: CrossfitPlan | int | None = None,
                  bootstrap: BootstrapConfig | None = None, threads: int | None = 1,
                  eps_d: float = EPS_D, seed: int | None = None) -> dict:
    """Evaluate a plan and attach intervals.

    With ``bootstrap`` every entry gets a percentile interval from refitting
    all nuisances on each stratified resample. Without it, influence-function
    estimators get Wald intervals from the estimated EIF, the difference in
    means gets its two-sample Wald interval, and other entries are point only.
    """
    specs = specs or NuisanceSpecs()
    plan = _as_plan(plan)
    if isinstance(crossfit, int):
        crossfit = CrossfitPlan(crossfit, 0 if seed is None else seed)
    crossfit = crossfit or CrossfitPlan(1)
    cells, _ = plan_requirements(ds, [e.method for e in plan])
    required = {(ds.config.roles()[role], z) for _, z, role in cells}
    folds = crossfit.assign(ds, required)
    outs, nf = evaluate_plan(ds, specs, plan, assignment, folds, None, eps_d)
    overlap = check_overlap(ds, nf) if nf is not None else []

    results = {}
    for e in plan:
        o = outs[e.name]
        raw = float(o.raw[0])
        if not math.isfinite(raw):
            if nf is not None and nf.failed[0]:
                from .errors import NoConvergence
                raise NoConvergence(f"nuisance fits failed for {e.name}")
            raise AllStrataDegenerate(f"{e.name}: every target row has |delta_D| below {eps_d}")
        diag = {
            "clamped_point": raw != clamp_estimate(raw),
            "raw_point": raw,
            "wald_clamp_count": int(o.clamped[0]),
            "denominator_floor_count": int(o.excluded[0]),
            "target_rows_used": int(o.n_used[0]),
            "nuisance_specs": specs.to_dict(),
            "nuisance_specs_digest": specs.digest(),
            "assignment": (assignment or AssignmentModel()).to_dict(),
            "crossfit": crossfit.to_dict(),
        }
        if e.sens is not None or e.method in POSTHOC_METHODS:
            diag["sensitivity"] = (e.sens or SensitivityParameter(0.0)).to_dict()
        if nf is not None:
            diag["identity_clamp_count"] = nf.counts["identity_clamped"]
            diag["separation_count"] = nf.counts["separation"]
        if overlap:
            diag["nonoverlap_trials"] = overlap
        if seed is not None:
            diag["seed"] = seed
        point = clamp_estimate(raw)
        comps = None if o.components is None else {k: v[0] for k, v in o.components.items()}
        res = EstimateResult(e.method, point, diagnostics=diag, components=comps)
        if bootstrap is None:
            if o.eif is not None:
                ci = eif_variance_ci(o.eif[0], point)
                res.se, res.ci = ci.se, ci.ci
                res.diagnostics["interval"] = "eif-wald"
            elif e.method == DIFF_IN_MEANS:
                se = float(o.components["se"][0])
                res.se, res.ci = se, (point - 1.959963984540054 * se, point + 1.959963984540054 * se)
                res.diagnostics["interval"] = "two-sample-wald"
        results[e.name] = res

    if bootstrap is not None:
        fn = _ReplicateFn(specs, plan, assignment, folds, eps_d)
        reps = batched_bootstrap(fn, ds, bootstrap, threads)
        for e in plan:
            r = reps.get(e.name, np.full(bootstrap.replicates, np.nan))
            base = results[e.name]
            if e.method in EIF_METHODS:
                base.diagnostics["eif_se"] = eif_variance_ci(outs[e.name].eif[0], base.point).se
            results[e.name] = bootstrap_result(base, r, bootstrap)
            results[e.name].diagnostics["interval"] = "bootstrap-percentile"
    return results


def _single(ds, specs, method, sens=None, **kw) -> EstimateResult:
    return estimate_plan(ds, specs, [PlanEntry(method, method, sens)], **kw)[method]


def estimate_itt_reg_design(ds, specs=None, **kw) -> EstimateResult:
    """Mean over target rows of [delta_Y/delta_D](X; h1) * delta_D(X; h2)."""
    return _single(ds, specs, REG_DESIGN, **kw)


def estimate_itt_eif_design(ds, specs=None, assignment=None, crossfit=5, **kw) -> EstimateResult:
    """Three-term influence-function estimator: h1 outcome residual term, h2
    compliance residual term and the plug-in term, over the target count."""
    return _single(ds, specs, EIF_DESIGN, assignment=assignment, crossfit=crossfit, **kw)


def estimate_itt_reg_posthoc(ds, specs=None, sens: SensitivityParameter | None = None, **kw) -> EstimateResult:
    """Mean over target rows of [delta_Y/delta_D](X; h1) * (mu_{D,1}(X; t) - mu*_{D,0}(X))."""
    return _single(ds, specs, REG_POSTHOC, sens or SensitivityParameter(0.0), **kw)


def estimate_itt_eif_posthoc(ds, specs=None, sens: SensitivityParameter | None = None, assignment=None,
                             crossfit=5, **kw) -> EstimateResult:
    return _single(ds, specs, EIF_POSTHOC, sens or SensitivityParameter(0.0), assignment=assignment,
                   crossfit=crossfit, **kw)


def estimate_itt_constancy(ds, source: str = HIST1, specs=None, **kw) -> EstimateResult:
    """Target-standardized delta_Y(X; source), valid only under conditional constancy."""
    method = {HIST1: CONSTANCY_1, "h1": CONSTANCY_1, HIST2: CONSTANCY_2, "h2": CONSTANCY_2}.get(source)
    if method is None:
        raise ConfigError(f"constancy source must be historical1 or historical2, got {source!r}")
    return _single(ds, specs, method, **kw)


def estimate_itt_no_crossover(ds, specs=None, **kw) -> EstimateResult:
    """Mean over target rows of [delta_Y/delta_D](X; h1) * mu_{D,1}(X; t)."""
    return _single(ds, specs, NO_CROSSOVER, **kw)


def estimate_difference_in_means(ds, **kw) -> EstimateResult:
    """Target-trial arm contrast of observed outcomes (needs target Y)."""
    return _single(ds, None, DIFF_IN_MEANS, **kw)


# ---------------------------------------------------------------------------
# g-estimation of a linear structural CATE


def _g_system(X, y, d, z, pz, h, W):
    """Weighted moment matrices of the g-estimation equation, batched over W."""
    Xt = np.hstack([np.ones((X.shape[0], 1)), X])
    H = h(X) if callable(h) else Xt
    sgn = (2 * z - 1) / pz
    A = np.einsum("bi,ij,ik->bjk", W, H * (sgn * d)[:, None], Xt)
    rhs = W @ (H * (sgn * y)[:, None])
    return A, rhs, H, Xt


def fit_structural_cate(ds: TrialDataset, trial: str = HIST1, h=None,
                        assignment: AssignmentModel | None = None, W=None) -> np.ndarray:
    """Solve sum_i h(X_i) (Y_i - D_i alpha'(1, X_i)) (2Z_i - 1) / f(Z_i | X_i) = 0 for alpha.

    ``trial`` is a role name or a trial label; ``h`` defaults to (1, X).
    Raises ``SingularSystem`` when the moment matrix is rank deficient.
    """
    label = ds.config.roles().get(trial, trial)
    rows = np.flatnonzero(ds.s == label)
    sub = ds.take(rows)
    assignment = assignment or AssignmentModel()
    nf = fit_nuisance_batch(sub, NuisanceSpecs(), [], assignment=assignment)
    pz = nf["pZ"][0]
    Wm = np.ones((1, len(sub))) if W is None else np.atleast_2d(W)[:, rows]
    A, rhs, H, Xt = _g_system(sub.X, sub.y, sub.d, sub.z, pz, h, Wm)
    if A.shape[1] != A.shape[2]:
        raise SingularSystem("weighting function must have as many columns as (1, X)")
    alpha = np.empty((A.shape[0], A.shape[2]))
    for b in range(A.shape[0]):
        if np.linalg.matrix_rank(A[b]) < A.shape[2]:
            raise SingularSystem("g-estimation moment matrix is singular")
        alpha[b] = np.linalg.solve(A[b], rhs[b])
    resid = (Wm * ((sub.y[None, :] - sub.d[None, :] * (alpha @ Xt.T)) * (2 * sub.z - 1) / pz)) @ H / len(sub)
    if np.abs(resid).max() > 1e-8 * max(1.0, np.abs(rhs).max() / len(sub)):
        raise SingularSystem("g-estimation system is too ill-conditioned to solve accurately")
    return alpha[0] if W is None else alpha


def _g_kernel(ds, nf, W, assignment) -> KernelOut:
    alpha = fit_structural_cate(ds, HIST1, assignment=assignment, W=W)
    alpha = np.atleast_2d(alpha)
    Xt = np.hstack([np.ones((len(ds), 1)), ds.X])
    raw_cate = alpha @ Xt.T
    cate = np.clip(raw_cate, -1.0, 1.0)
    tmask = ds.role_mask(TARGET)[None, :]
    out = _target_average(cate * nf["dD_h2"], np.ones(cate.shape, bool), tmask, W, cate != raw_cate)
    out.components = {"cate": cate, "cc": nf["dD_h2"], "keep": np.ones(cate.shape, bool), "target": tmask}
    return out


def estimate_itt_g_estimation(ds, specs=None, **kw) -> EstimateResult:
    """Target average of the g-estimated linear CATE times delta_D(X; h2)."""
    return _single(ds, specs, G_ESTIMATION, **kw)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlaceboIncidence:
    placebo: float
    experimental_contrast: float | None = None
    percent_reduction: float | None = None
    placebo_ci: tuple | None = None
    negative: bool = False

    def to_dict(self) -> dict:
        return {"placebo": self.placebo, "experimental_contrast": self.experimental_contrast,
                "percent_reduction": self.percent_reduction,
                "placebo_ci": None if self.placebo_ci is None else list(self.placebo_ci),
                "negative": self.negative}


def counterfactual_placebo_incidence(ac_incidence: float, itt, experimental: float | None = None) -> PlaceboIncidence:
    """Placebo-arm incidence implied by the AC-arm incidence and ITT (AC minus placebo).

    With ``experimental`` incidence, also report experimental minus placebo and
    the percent reduction ``100 * (1 - experimental / placebo)``.
    """
    if ac_incidence < 0 or (experimental is not None and experimental < 0):
        raise ConfigError("incidence rates must be non-negative")
    point = float(itt.point if isinstance(itt, EstimateResult) else itt)
    placebo = ac_incidence - point
    ci = None
    if isinstance(itt, EstimateResult) and itt.ci is not None:
        ci = (ac_incidence - itt.ci[1], ac_incidence - itt.ci[0])
    negative = placebo < 0
    if negative:
        warnings.warn(NegativeIncidence(f"implied placebo incidence {placebo:g} is negative"))
    contrast = reduction = None
    if experimental is not None:
        contrast = experimental - placebo
        reduction = 100.0 * (1.0 - experimental / placebo) if placebo != 0 else None
    return PlaceboIncidence(placebo, contrast, reduction, ci, negative)
