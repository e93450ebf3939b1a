"""Partial identification of the historical CATE and of the target ITT.

Two families of "minimal assumption" bounds are provided for a binary
instrument Z and binary uptake D:

* Balke-Pearl envelopes for a binary outcome, valid when the instrumental
  variable conditions hold within covariate strata;
* Manski-Pepper envelopes for an outcome bounded in ``[K0, K1]``, which
  replace each censored potential-outcome mean by the bound.

``partial_id_itt`` instead bounds the noncomplier effect and carries the
resulting CATE interval through to the target trial.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import glm
from .data import HIST1, HIST2, TARGET, TrialDataset
from .errors import ConfigError, InvalidBounds, InvalidDistribution, MissingRole
from .nuisance import AssignmentModel, GlmSpec, NuisanceSpecs, fit_glm, fit_nuisance_batch
from .results import _jsonable

PROB_TOL = 1e-9
BALKE_PEARL = "balke-pearl"
MANSKI_PEPPER = "manski-pepper"
PARTIAL_ID = "partial-id-itt"


@dataclass(frozen=True)
class StratumProbabilities:
    """Joint cell probabilities ``p[..., z, y, d] = P(Y=y, D=d | Z=z)``.

    Leading axes index strata (covariate values); a single stratum has shape
    ``(2, 2, 2)``. Construction validates every stratum.
    """

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape[-3:] != (2, 2, 2):
            raise InvalidDistribution(f"expected trailing shape (2, 2, 2), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidDistribution("cell probabilities must be finite")
        if np.any(p < -PROB_TOL) or np.any(p > 1 + PROB_TOL):
            raise InvalidDistribution("cell probabilities must lie in [0, 1]")
        totals = p.sum(axis=(-2, -1))
        if np.any(np.abs(totals - 1.0) > PROB_TOL):
            worst = float(np.max(np.abs(totals - 1.0)))
            raise InvalidDistribution(f"cell probabilities within an arm must sum to 1 (off by {worst:.3g})")
        object.__setattr__(self, "p", np.clip(p, 0.0, 1.0))

    @classmethod
    def from_cells(cls, cells: dict) -> "StratumProbabilities":
        """From a mapping ``{(y, d, z): p}`` or ``{"p_ydz": p}`` for one stratum."""
        p = np.zeros((2, 2, 2))
        for k, v in cells.items():
            y, d, z = (int(c) for c in (k[2:] if isinstance(k, str) else k))
            p[z, y, d] = v
        return cls(p)

    @classmethod
    def from_factors(cls, pd1, py1) -> "StratumProbabilities":
        """From ``pd1[..., z] = P(D=1|Z=z)`` and ``py1[..., z, d] = P(Y=1|D=d,Z=z)``."""
        pd1 = np.asarray(pd1, dtype=float)
        py1 = np.asarray(py1, dtype=float)
        pd = np.stack([1.0 - pd1, pd1], axis=-1)                    # [..., z, d]
        py = np.stack([1.0 - py1, py1], axis=-2)                    # [..., z, y, d]
        return cls(py * pd[..., None, :])

    @property
    def n_strata(self) -> int:
        return int(np.prod(self.p.shape[:-3], dtype=int))

    def cell(self, y: int, d: int, z: int) -> np.ndarray:
        return self.p[..., z, y, d]

    def uptake(self) -> np.ndarray:
        """P(D=1 | Z=z), shape ``(..., 2)``."""
        return self.p[..., :, :, 1].sum(axis=-1)

    def outcome_given_uptake(self, d: int) -> np.ndarray:
        """E[Y | D=d, Z=z], shape ``(..., 2)``; NaN where P(D=d | Z=z) = 0."""
        pd = self.p[..., :, :, d].sum(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(pd > 0, self.p[..., :, 1, d] / np.where(pd > 0, pd, 1.0), np.nan)


@dataclass
class BoundsResult:
    lower: float
    upper: float
    method: str
    strata: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lower > self.upper + 1e-12:
            raise InvalidBounds(f"lower bound {self.lower} exceeds upper bound {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float, tol: float = 0.0) -> bool:
        return self.lower - tol <= value <= self.upper + tol

    def to_dict(self, detail: bool = False) -> dict:
        out = {"method": self.method, "lower": self.lower, "upper": self.upper,
               "width": self.width, "diagnostics": self.diagnostics}
        if detail:
            out["strata"] = self.strata
        return _jsonable(out)

    def to_json(self, detail: bool = False, **kw) -> str:
        kw.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(detail), **kw)


@dataclass(frozen=True)
class OutcomeBounds:
    """Known support ``[k0, k1]`` of the outcome."""

    k0: float = 0.0
    k1: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.k0) and np.isfinite(self.k1)):
            raise InvalidBounds("outcome bounds must be finite")
        if self.k0 > self.k1:
            raise InvalidBounds(f"K0={self.k0} exceeds K1={self.k1}")


def _weighted(v, weights):
    v = np.asarray(v, dtype=float).reshape(-1)
    if weights is None:
        return float(v.mean())
    w = np.asarray(weights, dtype=float).reshape(-1)
    return float(w @ v / w.sum())


def balke_pearl_envelopes(sp: StratumProbabilities) -> dict:
    """Per-stratum envelopes of E[Y(0)], E[Y(1)] and their difference."""
    P = sp.cell
    l0 = np.max([P(1, 0, 1), P(1, 0, 0),
                 P(1, 0, 0) + P(1, 1, 0) - P(0, 0, 1) - P(1, 1, 1),
                 P(0, 1, 0) + P(1, 0, 0) - P(0, 0, 1) - P(0, 1, 1)], axis=0)
    u0 = np.min([1 - P(0, 0, 1), 1 - P(0, 0, 0),
                 P(0, 1, 0) + P(1, 0, 0) + P(1, 0, 1) + P(1, 1, 1),
                 P(1, 0, 0) + P(1, 1, 0) + P(0, 1, 1) + P(1, 0, 1)], axis=0)
    l1 = np.max([P(1, 1, 0), P(1, 1, 1),
                 -P(0, 0, 0) - P(0, 1, 0) + P(0, 0, 1) + P(1, 1, 1),
                 -P(0, 1, 0) - P(1, 0, 0) + P(1, 0, 1) + P(1, 1, 1)], axis=0)
    u1 = np.min([1 - P(0, 1, 1), 1 - P(0, 1, 0),
                 P(0, 0, 0) + P(1, 1, 0) + P(1, 0, 1) + P(1, 1, 1),
                 P(1, 0, 0) + P(1, 1, 0) + P(0, 0, 1) + P(1, 1, 1)], axis=0)
    # crossing envelopes mean the distribution violates the IV inequalities,
    # which happens with fitted probabilities; collapse them to the midpoint
    crossed = (l0 > u0) | (l1 > u1)
    l0, u0 = _uncross(l0, u0)
    l1, u1 = _uncross(l1, u1)
    return {"y0": (l0, u0), "y1": (l1, u1), "cate": (l1 - u0, u1 - l0), "crossed": crossed}


def _uncross(lo, hi):
    mid = 0.5 * (lo + hi)
    bad = lo > hi
    return np.where(bad, mid, lo), np.where(bad, mid, hi)


def balke_pearl_bounds(p, weights=None) -> BoundsResult:
    """Bounds on CATE = E[Y(1)] - E[Y(0)] for a binary outcome.

    Each potential-outcome mean is bounded by the max/min of four linear
    combinations of the cell probabilities; the CATE bounds are their
    difference. Strata whose envelopes cross (no IV-compatible joint exists)
    are collapsed to the midpoint and counted in ``iv_violation_count``.
    With several strata the bounds are averaged with ``weights`` (uniform by
    default), which bounds the marginal effect.
    """
    sp = p if isinstance(p, StratumProbabilities) else StratumProbabilities(p)
    env = balke_pearl_envelopes(sp)
    lo, hi = env["cate"]
    crossed = np.ravel(env.pop("crossed"))
    strata = [{"y0": [float(a), float(b)], "y1": [float(c), float(d)], "cate": [float(e), float(f)]}
              for a, b, c, d, e, f in zip(*(np.ravel(x) for pair in env.values() for x in pair))]
    return BoundsResult(_weighted(lo, weights), _weighted(hi, weights), BALKE_PEARL, strata,
                        {"iv_violation_count": int(crossed.sum())})


def manski_pepper_psi(mean_y, p_d, k: float) -> np.ndarray:
    """E[Y|D=d,Z=z] P(D=d|Z=z) + k P(D!=d|Z=z); a zero-probability arm contributes k."""
    mean_y = np.asarray(mean_y, dtype=float)
    p_d = np.asarray(p_d, dtype=float)
    observed = np.where(p_d > 0, np.nan_to_num(mean_y) * p_d, 0.0)
    return observed + k * (1.0 - p_d)


def _check_prob(v, what):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v < -PROB_TOL) or np.any(v > 1 + PROB_TOL):
        raise InvalidDistribution(f"{what} must lie in [0, 1]")
    return np.clip(v, 0.0, 1.0)


def manski_pepper_bounds(mean_y, p_d, pi_z, k: OutcomeBounds = OutcomeBounds(), d: int = 1,
                         weights=None) -> BoundsResult:
    """Bounds on E[Y(d)] from arm-specific observed means.

    Parameters
    ----------
    mean_y, p_d, pi_z : array_like, shape (..., 2)
        E[Y | D=d, Z=z], P(D=d | Z=z) and P(Z=z), indexed by z on the last axis.
        Leading axes index strata.
    k : OutcomeBounds
        Support of Y; the censored term takes ``k.k0`` (lower) or ``k.k1`` (upper).
    d : int
        Uptake level whose potential outcome is bounded.
    weights : array_like, optional
        Stratum weights for the marginal bound.
    """
    if d not in (0, 1):
        raise ConfigError("d must be 0 or 1")
    p_d = _check_prob(p_d, "P(D=d|Z=z)")
    pi_z = _check_prob(pi_z, "P(Z=z)")
    if np.any(np.abs(pi_z.sum(axis=-1) - 1.0) > PROB_TOL):
        raise InvalidDistribution("P(Z=z) must sum to 1 over z")
    mean_y = np.asarray(mean_y, dtype=float)
    if np.any((p_d > 0) & ~((mean_y >= k.k0 - PROB_TOL) & (mean_y <= k.k1 + PROB_TOL))):
        raise InvalidDistribution("observed means must lie within the outcome bounds")
    lo = (manski_pepper_psi(mean_y, p_d, k.k0) * pi_z).sum(axis=-1)
    hi = (manski_pepper_psi(mean_y, p_d, k.k1) * pi_z).sum(axis=-1)
    strata = [{"lower": float(a), "upper": float(b)} for a, b in zip(np.ravel(lo), np.ravel(hi))]
    return BoundsResult(_weighted(lo, weights), _weighted(hi, weights), MANSKI_PEPPER, strata,
                        {"d": d, "k0": k.k0, "k1": k.k1})


def manski_pepper_cate(sp: StratumProbabilities, pi_z, k: OutcomeBounds = OutcomeBounds(),
                       weights=None) -> BoundsResult:
    """CATE bounds [L1 - U0, U1 - L0] from the two potential-outcome envelopes."""
    pd1 = sp.uptake()
    y1 = manski_pepper_bounds(sp.outcome_given_uptake(1), pd1, pi_z, k, 1)
    y0 = manski_pepper_bounds(sp.outcome_given_uptake(0), 1.0 - pd1, pi_z, k, 0)
    lo = np.array([s["lower"] for s in y1.strata]) - np.array([s["upper"] for s in y0.strata])
    hi = np.array([s["upper"] for s in y1.strata]) - np.array([s["lower"] for s in y0.strata])
    strata = [{"y0": [a["lower"], a["upper"]], "y1": [b["lower"], b["upper"]], "cate": [float(c), float(e)]}
              for a, b, c, e in zip(y0.strata, y1.strata, lo, hi)]
    return BoundsResult(_weighted(lo, weights), _weighted(hi, weights), MANSKI_PEPPER, strata,
                        {"k0": k.k0, "k1": k.k1})


# ---------------------------------------------------------------------------
# estimating stratum probabilities from trial data


def _assignment_probs(ds: TrialDataset, rows, X_eval, assignment: AssignmentModel) -> np.ndarray:
    """P(Z=1 | X) in the trial made of ``rows``, evaluated at ``X_eval``."""
    label = str(ds.s[rows][0])
    if assignment.mode == "known":
        return np.full(X_eval.shape[0], assignment.probabilities.get(label, assignment.default))
    if assignment.mode == "constant":
        return np.full(X_eval.shape[0], float(np.mean(ds.z[rows])))
    Phi = np.column_stack([np.ones(rows.size), ds.X[rows]])
    fit = glm.fit_logit(Phi, ds.z[rows], None)
    return expit(np.column_stack([np.ones(X_eval.shape[0]), X_eval]) @ fit.coef[0])


def _saturated_probs(ds: TrialDataset, rows, X_eval):
    """Empirical cell frequencies within each distinct covariate pattern."""
    Xh = ds.X[rows]
    pd1 = np.empty((X_eval.shape[0], 2))
    py1 = np.full((X_eval.shape[0], 2, 2), 0.5)
    for i, x in enumerate(X_eval):
        same = np.all(Xh == x, axis=1)
        for z in (0, 1):
            arm = same & (ds.z[rows] == z)
            if not arm.any():
                raise InvalidDistribution(f"no rows with Z={z} at covariate pattern {x.tolist()}")
            dz = ds.d[rows][arm]
            pd1[i, z] = dz.mean()
            for d in (0, 1):
                if (dz == d).any():
                    py1[i, z, d] = ds.y[rows][arm][dz == d].mean()
    return pd1, py1


def stratum_probabilities(ds: TrialDataset, specs: NuisanceSpecs | None = None, trial: str = HIST1,
                          at: str = TARGET, saturated: bool = False) -> StratumProbabilities:
    """P(Y=y, D=d | X, Z=z) in trial role ``trial`` at the covariates of role ``at``.

    The joint is factorized as P(D | X, Z) P(Y | D, X, Z), each factor a binary
    regression fit with the nuisance engine. ``saturated=True`` uses empirical
    frequencies within distinct covariate patterns instead (discrete X only).
    """
    specs = specs or NuisanceSpecs()
    ds.check_roles([trial, at])
    rows = np.flatnonzero(ds.role_mask(trial))
    X_eval = ds.X[ds.role_mask(at)]
    if np.isnan(ds.y[rows]).any() or np.isnan(ds.d[rows]).any() or np.isnan(ds.z[rows]).any():
        raise MissingRole(f"role {trial} needs Z, D and Y on every row")
    if saturated:
        return StratumProbabilities.from_factors(*_saturated_probs(ds, rows, X_eval))
    spec_d = GlmSpec("logit", specs.treatment.basis, specs.treatment.n_knots, ridge=specs.treatment.ridge,
                     smoothing=specs.treatment.smoothing)
    spec_y = specs.outcome
    if spec_y.link != "logit":
        spec_y = GlmSpec("logit", spec_y.basis, spec_y.n_knots, ridge=spec_y.ridge, smoothing=spec_y.smoothing)
    basis_d = spec_d.build_basis(ds.X[rows])
    basis_y = spec_y.build_basis(ds.X[rows])
    pd1 = np.empty((X_eval.shape[0], 2))
    py1 = np.full((X_eval.shape[0], 2, 2), 0.5)
    for z in (0, 1):
        arm = rows[ds.z[rows] == z]
        if arm.size == 0:
            raise InvalidDistribution(f"role {trial} has no rows with Z={z}")
        pd1[:, z] = fit_glm(ds.take(arm), "D", spec_d, basis=basis_d).predict(X_eval)
        for d in (0, 1):
            cell = arm[ds.d[arm] == d]
            if cell.size:
                py1[:, z, d] = fit_glm(ds.take(cell), "Y", spec_y, basis=basis_y).predict(X_eval)
    return StratumProbabilities.from_factors(np.clip(pd1, 0.0, 1.0), np.clip(py1, 0.0, 1.0))


def bounds_from_data(ds: TrialDataset, method: str = BALKE_PEARL, specs: NuisanceSpecs | None = None,
                     k: OutcomeBounds = OutcomeBounds(), assignment: AssignmentModel | None = None,
                     saturated: bool = False) -> BoundsResult:
    """CATE(X; h1) bounds averaged over target covariates."""
    if method == PARTIAL_ID or method == "partial-id":
        return partial_id_itt(ds, specs)
    sp = stratum_probabilities(ds, specs, saturated=saturated)
    if method == BALKE_PEARL:
        out = balke_pearl_bounds(sp)
    elif method == MANSKI_PEPPER:
        rows = np.flatnonzero(ds.role_mask(HIST1))
        pz1 = _assignment_probs(ds, rows, ds.X[ds.role_mask(TARGET)], assignment or AssignmentModel())
        out = manski_pepper_cate(sp, np.column_stack([1.0 - pz1, pz1]), k)
    else:
        raise ConfigError(f"unknown bounds method {method!r}")
    out.diagnostics.update({"estimand": "CATE(X; h1) averaged over target X",
                            "strata_source": "saturated" if saturated else (specs or NuisanceSpecs()).to_dict()})
    return out


# ---------------------------------------------------------------------------
# complier / noncomplier decomposition carried to the target trial


def _per_row(v, X, n):
    if v is None:
        return None
    if callable(v):
        return np.asarray(v(X), dtype=float).reshape(n)
    return np.broadcast_to(np.asarray(v, dtype=float), (n,)).astype(float)


def partial_id_itt(ds: TrialDataset, specs: NuisanceSpecs | None = None, sens=None, tau_min=None,
                   tau_max=None, eps_d: float | None = None) -> BoundsResult:
    """Interval for the target ITT when the no-interaction assumption is dropped.

    Within X the historical CATE is a mixture of the complier effect (the
    conditional Wald ratio) and an unidentified noncomplier effect tau(X):

        CATE(X) = c(X) * Wald(X) + (1 - c(X)) * tau(X),

    where the complier share c(X) is the compliance contrast in the first
    historical trial. By default tau ranges from minus the placebo-arm outcome
    mean (all events prevented) to 0 (no effect). The CATE interval times the
    target compliance contrast is averaged over target rows.

    Parameters
    ----------
    sens : SensitivityParameter, optional
        Post-hoc mode: compliance is E[D | X, Z=1, t] minus ``sens``. Without
        it the second historical trial supplies the contrast.
    tau_min, tau_max : float, array or callable of X, optional
        Override the noncomplier effect range (per row of ``ds``).
    """
    from .estimators import EPS_D, SensitivityParameter, _posthoc_cc, _wald

    eps_d = EPS_D if eps_d is None else eps_d
    if sens is not None and not isinstance(sens, SensitivityParameter):
        sens = SensitivityParameter(float(sens))
    specs = specs or NuisanceSpecs()
    ds.check_roles([TARGET, HIST1])
    cells = [("Y", 0, HIST1), ("Y", 1, HIST1), ("D", 0, HIST1), ("D", 1, HIST1)]
    if sens is None:
        if ds.config.h2_label is None:
            raise MissingRole("partial identification needs a second historical trial or a sensitivity value")
        cells += [("D", 0, HIST2), ("D", 1, HIST2)]
    else:
        t = ds.role_mask(TARGET)
        if np.isnan(ds.d[t]).any() or np.isnan(ds.z[t]).any() or not np.any(ds.z[t] == 1):
            raise MissingRole("post-hoc partial identification needs Z and D on target rows")
        cells.append(("D", 1, TARGET))
    nf = fit_nuisance_batch(ds, specs, cells)
    n = len(ds)
    ratio, keep, _ = _wald(nf["dY_h1"][0], nf["dD_h1"][0], eps_d)
    share = np.clip(nf["dD_h1"][0], 0.0, 1.0)
    cc = nf["dD_h2"][0] if sens is None else _posthoc_cc(ds, nf, sens)[0]
    t_lo = _per_row(tau_min, ds.X, n)
    t_hi = _per_row(tau_max, ds.X, n)
    t_lo = -nf["mu_Y0_h1"][0] if t_lo is None else t_lo
    t_hi = np.zeros(n) if t_hi is None else t_hi
    if np.any(t_lo > t_hi):
        raise InvalidBounds("noncomplier effect range has tau_min > tau_max")
    cate_lo = share * ratio + (1.0 - share) * t_lo
    cate_hi = share * ratio + (1.0 - share) * t_hi
    a, b = cate_lo * cc, cate_hi * cc
    use = ds.role_mask(TARGET) & keep
    if not use.any():
        from .errors import AllStrataDegenerate
        raise AllStrataDegenerate(f"every target row has |delta_D| below {eps_d}")
    lo = np.clip(np.minimum(a, b)[use].mean(), -1.0, 1.0)
    hi = np.clip(np.maximum(a, b)[use].mean(), -1.0, 1.0)
    strata = [{"complier_share": float(s), "wald": float(w), "tau": [float(p), float(q)], "cc": float(c)}
              for s, w, p, q, c in zip(share[use], ratio[use], t_lo[use], t_hi[use], cc[use])]
    diag = {"target_rows_used": int(use.sum()), "denominator_floor_count": int((ds.role_mask(TARGET) & ~keep).sum()),
            "tau": "custom" if tau_min is not None or tau_max is not None else "[-E[Y|X,Z=0,h1], 0]",
            "nuisance_specs": specs.to_dict()}
    if sens is not None:
        diag["sensitivity"] = sens.to_dict()
    return BoundsResult(float(lo), float(hi), PARTIAL_ID, strata, diag)
