"""Sensitivity analyses for the untestable bridging assumptions.

* ``lambda_adjust`` shifts a product-form estimate by ``lambda1 * lambda2``,
  the bias introduced when an unmeasured standardized confounder U modifies
  both the treatment effect (scale ``lambda1``) and compliance (``lambda2``).
* ``cc_p_sweep`` re-evaluates the post-hoc estimators over assumed placebo-arm
  uptake values.
* ``cate_scale`` multiplies the transported CATE by a factor in (0, 1].

Sensitivity intervals are envelopes (unions) of the per-scenario intervals.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import TrialDataset
from .errors import ConfigError
from .estimators import (EIF_POSTHOC, NO_CROSSOVER, REG_POSTHOC, PlanEntry, SensitivityParameter,
                         estimate_plan)
from .nuisance import NuisanceSpecs
from .results import EstimateResult, _jsonable, clamp_estimate

DEFAULT_LAMBDAS = tuple(np.round(np.linspace(-0.2, 0.2, 5), 12).tolist())
BASE = "base"


@dataclass(frozen=True)
class LambdaPair:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ConfigError("lambda values must be finite")

    @property
    def shift(self) -> float:
        return self.lambda1 * self.lambda2

    @property
    def label(self) -> str:
        return f"lambda1={self.lambda1:g},lambda2={self.lambda2:g}"


def lambda_grid(lambda1=DEFAULT_LAMBDAS, lambda2=DEFAULT_LAMBDAS) -> list[LambdaPair]:
    return [LambdaPair(float(a), float(b)) for a in lambda1 for b in lambda2]


def lambda_adjust(base: EstimateResult, lp: LambdaPair) -> EstimateResult:
    """Bias-corrected estimate: point and interval shifted by ``lambda1 * lambda2``.

    The shift is exact; no clamping is applied so that the correction stays
    additive.
    """
    return base.shifted(lp.shift, lambda1=lp.lambda1, lambda2=lp.lambda2)


def sensitivity_interval(results) -> tuple[float, float]:
    """Envelope (union) of the confidence intervals of ``results``."""
    cis = [r.ci for r in results]
    if not cis or any(ci is None for ci in cis):
        raise ConfigError("every scenario needs a confidence interval to form a sensitivity interval")
    return float(min(c[0] for c in cis)), float(max(c[1] for c in cis))


def cate_scale(base: EstimateResult, s: float) -> EstimateResult:
    """Re-average the product ``s * CATE(X) * CC(X)`` over the rows ``base`` used.

    ``base.components`` must hold the per-row ``cate`` and ``cc`` factors, with
    optional ``keep`` and ``target`` masks selecting the averaged rows.
    """
    if not 0.0 < s <= 1.0:
        raise ConfigError(f"CATE scale must lie in (0, 1], got {s}")
    comps = base.components
    if not comps or "cate" not in comps or "cc" not in comps:
        raise ConfigError(f"{base.method} estimate carries no product components to rescale")
    cate = np.asarray(comps["cate"], dtype=float)
    cc = np.broadcast_to(np.asarray(comps["cc"], dtype=float), cate.shape)
    use = np.ones(cate.shape, bool)
    for k in ("keep", "target"):
        if comps.get(k) is not None:
            use &= np.broadcast_to(np.asarray(comps[k], bool), cate.shape)
    # same reduction order as the estimators, so s = 1 reproduces the base point exactly
    raw = float(np.where(use, s * cate * cc, 0.0).sum() / use.sum())
    return EstimateResult(base.method, clamp_estimate(raw), None, None, base.estimand,
                          {**base.diagnostics, "cate_scale": s, "raw_point": raw},
                          {**comps, "cate": s * cate})


@dataclass
class SensitivityGrid:
    """Scenario label -> parameters and estimate; ``base`` has every relaxation off."""

    kind: str
    scenarios: list = field(default_factory=list)   # dicts: label, params, result

    def __post_init__(self):
        if self.scenarios and BASE not in self.labels:
            raise ConfigError("sensitivity grid must contain the base scenario")

    @property
    def labels(self) -> list[str]:
        return [s["label"] for s in self.scenarios]

    def __getitem__(self, label: str) -> EstimateResult:
        for s in self.scenarios:
            if s["label"] == label:
                return s["result"]
        raise KeyError(label)

    def results(self) -> list[EstimateResult]:
        return [s["result"] for s in self.scenarios]

    def interval(self) -> tuple[float, float]:
        return sensitivity_interval(self.results())

    def to_dict(self) -> dict:
        out = {"kind": self.kind,
               "scenarios": [{"label": s["label"], "params": s["params"], "estimate": s["result"].to_dict()}
                             for s in self.scenarios]}
        if all(s["result"].ci is not None for s in self.scenarios):
            out["sensitivity_interval"] = list(self.interval())
        return _jsonable(out)

    def to_json(self, **kw) -> str:
        kw.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kw)

    def write_csv(self, path) -> None:
        keys = sorted({k for s in self.scenarios for k in s["params"]})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", *keys, "method", "point", "se", "ci_lower", "ci_upper"])
            for s in self.scenarios:
                r = s["result"]
                lo, hi = r.ci if r.ci else ("", "")
                w.writerow([s["label"], *[s["params"].get(k, "") for k in keys], r.method, repr(r.point),
                            "" if r.se is None else repr(r.se), lo if lo == "" else repr(lo),
                            hi if hi == "" else repr(hi)])


def lambda_sweep(base: EstimateResult, grid=None) -> SensitivityGrid:
    """``lambda_adjust`` over ``grid`` (default 5 x 5 lattice on [-0.2, 0.2]^2)."""
    grid = lambda_grid() if grid is None else [g if isinstance(g, LambdaPair) else LambdaPair(*g) for g in grid]
    scen = [{"label": BASE, "params": {"lambda1": 0.0, "lambda2": 0.0}, "result": base}]
    for lp in grid:
        if lp.lambda1 == 0.0 and lp.lambda2 == 0.0:
            continue
        scen.append({"label": lp.label, "params": {"lambda1": lp.lambda1, "lambda2": lp.lambda2},
                     "result": lambda_adjust(base, lp)})
    return SensitivityGrid("lambda", scen)


def cc_p_sweep(ds: TrialDataset, specs: NuisanceSpecs | None = None, grid=(0.0, 0.05, 0.10),
               method: str = "reg", **kw) -> SensitivityGrid:
    """Post-hoc estimates over assumed placebo-arm uptake values.

    Nuisances are fit once and every grid value is evaluated on them, so the
    entries differ only through the sensitivity value. The value 0 is the
    base scenario; it is added when absent. Keyword arguments go to
    ``estimate_plan`` (bootstrap, crossfit, seed, ...).
    """
    if method not in ("reg", "eif"):
        raise ConfigError("method must be 'reg' or 'eif'")
    m = REG_POSTHOC if method == "reg" else EIF_POSTHOC
    values = [float(v) for v in grid]
    if 0.0 not in values:
        values = [0.0, *values]
    plan = [PlanEntry(BASE if v == 0.0 else f"cc_p={v:g}", m, SensitivityParameter(v)) for v in values]
    res = estimate_plan(ds, specs, plan, **kw)
    scen = [{"label": e.name, "params": {"cc_p": e.sens.value}, "result": res[e.name]} for e in plan]
    return SensitivityGrid("cc_p", scen)


def no_crossover_reference(ds: TrialDataset, specs: NuisanceSpecs | None = None, **kw) -> EstimateResult:
    """The post-hoc estimate with zero placebo uptake, by its own name."""
    return estimate_plan(ds, specs, [NO_CROSSOVER], **kw)[NO_CROSSOVER]
