"""Synthetic three-trial studies with known ITT, and a Monte Carlo harness.

Scenario X2 draws ten independent N(mu, 0.5) covariates whose first three
means are shifted per trial by the overlap parameter ``c`` (1.2c in the first
historical trial, c in the second, 0.8c in the target). Assignment is a fair
coin everywhere; uptake and outcome follow logistic models given (X, Z), with
Y and D drawn independently given (X, Z). In the target, the placebo arm
never has the outcome and the assigned arm has it with probability
CATE(X; h1) * CC(X; h2), so the true ITT is the target mean of that product.

Outcome scenario Y2 takes square roots of normal covariates, which are
negative with positive probability. We use the sign-preserving root
``sign(x) * sqrt(|x|)``; every report carries this note.
"""
from __future__ import annotations

import csv
import functools
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import multivariate_normal

from .data import RoleConfig, TrialDataset, _read_config
from .errors import ConfigError, InsufficientReplicates, IttBridgeError
from .estimators import (CONSTANCY_1, CONSTANCY_2, DIFF_IN_MEANS, EIF_DESIGN, REG_DESIGN,
                         PlanEntry, estimate_plan)
from .inference import GENERATOR_FAMILY, BootstrapConfig, CrossfitPlan, make_rng, resolve_threads
from .nuisance import NuisanceFit, NuisanceSpecs

P = 10
LABELS = ("h1", "h2", "t")
MEAN_SCALE = {"h1": 1.2, "h2": 1.0, "t": 0.8}
SQRT_NOTE = "Y2 square roots of covariates use sign(x)*sqrt(|x|)"

# estimator name -> (method, nuisance family, interval)
ESTIMATORS = {
    "hypo": (DIFF_IN_MEANS, None, "two-sample"),
    "const_1": (CONSTANCY_1, "linear", "bootstrap"),
    "const_2": (CONSTANCY_2, "linear", "bootstrap"),
    "reg_par": (REG_DESIGN, "linear", "bootstrap"),
    "eif_par": (EIF_DESIGN, "linear", "bootstrap"),
    "eif_gam": (EIF_DESIGN, "spline", "eif"),
}
DEFAULT_ESTIMATORS = tuple(ESTIMATORS)


def signed_sqrt(x):
    return np.sign(x) * np.sqrt(np.abs(x))


@dataclass(frozen=True)
class ScenarioConfig:
    covariates: str = "X2"
    outcome: str = "Y1"
    c: float = 0.0
    n: int = 2000
    n_target: int | None = None
    replicates: int = 500
    seed: int = 0
    estimators: tuple = DEFAULT_ESTIMATORS
    bootstrap: int = 1000
    crossfit: int = 5
    n_knots: int = 4
    truth_draws: int = 10_000_000
    zero_effect: bool = False

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.covariates != "X2":
            raise ConfigError(f"only covariate scenario X2 is available, got {self.covariates!r}")
        if self.outcome not in ("Y1", "Y2"):
            raise ConfigError(f"outcome scenario must be Y1 or Y2, got {self.outcome!r}")
        if self.c < 0:
            raise ConfigError("overlap parameter c must be non-negative")
        if self.n < 100 or (self.n_target is not None and self.n_target < 100):
            raise ConfigError("trial sizes must be at least 100")
        if self.replicates < 1 or self.bootstrap == 1 or self.bootstrap < 0 or self.crossfit < 1:
            raise ConfigError("need replicates >= 1, crossfit >= 1 and bootstrap 0 (off) or >= 2")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ConfigError(f"unknown estimators {sorted(unknown)}; choose from {sorted(ESTIMATORS)}")

    @property
    def sizes(self) -> dict:
        return {"h1": self.n, "h2": self.n, "t": self.n if self.n_target is None else self.n_target}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad scenario config: {exc}") from None

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        return cls.from_dict(_read_config(path))


# ---------------------------------------------------------------------------
# true conditional means


def covariate_mean(cfg: ScenarioConfig, label: str) -> np.ndarray:
    mu = np.zeros(P)
    mu[:3] = MEAN_SCALE[label] * cfg.c
    return mu


def uptake_prob(X, z, label: str) -> np.ndarray:
    """P(D = 1 | X, Z = z) in trial ``label``."""
    X = np.atleast_2d(X)
    x1, x2, x5 = X[:, 0], X[:, 1], X[:, 4]
    if label == "h1":
        return expit(z * (2 + 0.2 * x1 - 0.2 * x5) + (1 - z) * (-0.2 * x5 - 1))
    return expit(z * (2.5 - 0.1 * x1 + 0.3 * x2 - 0.4 * x5) + (1 - z) * (-0.3 * x1 - 0.4 * x5 - 1.5))


def outcome_prob(X, z, label: str, outcome: str = "Y1", zero_effect: bool = False) -> np.ndarray:
    """P(Y = 1 | X, Z = z) in historical trial ``label``."""
    X = np.atleast_2d(X)
    x1, x2, x3, x5 = X[:, 0], X[:, 1], X[:, 2], X[:, 4]
    if zero_effect:
        z = 0
    if label == "h1":
        if outcome == "Y1":
            arm1 = 2.6 - 0.6 * x1 - 0.8 * x2 + 0.4 * x3
            arm0 = 1.6 - 0.7 * x1 - 0.7 * x2 + 0.4 * x3 - 0.2 * x5
        else:
            arm1 = 2.6 - 0.6 * x1 - 0.8 * x2 + 0.4 * signed_sqrt(x3)
            arm0 = 1.6 - 0.7 * x1 - 0.7 * x2 ** 3 + 0.4 * x3 - 0.2 * x5
        return expit(z * arm1 + (1 - z) * arm0)
    if label == "h2":
        root = x2 if outcome == "Y1" else signed_sqrt(x2)
        return expit(1.4 - x1 - 0.6 * root + 0.4 * x3 - 0.6 * x5 + 3.5 * z)
    raise ConfigError(f"no historical outcome model for {label!r}")


def true_cate(X, cfg: ScenarioConfig) -> np.ndarray:
    dy = outcome_prob(X, 1, "h1", cfg.outcome, cfg.zero_effect) - outcome_prob(X, 0, "h1", cfg.outcome, cfg.zero_effect)
    return dy / (uptake_prob(X, 1, "h1") - uptake_prob(X, 0, "h1"))


def true_cc(X) -> np.ndarray:
    return uptake_prob(X, 1, "h2") - uptake_prob(X, 0, "h2")


def target_outcome_prob(X, z, cfg: ScenarioConfig) -> np.ndarray:
    if np.ndim(z) == 0 and z == 0:
        return np.zeros(np.atleast_2d(X).shape[0])
    p1 = np.clip(true_cate(X, cfg) * true_cc(X), 0.0, 1.0)
    return np.where(np.asarray(z) == 1, p1, 0.0)


def true_participation(X, cfg: ScenarioConfig) -> dict:
    """f(S = s | X) from the normal covariate laws with priors proportional to trial sizes."""
    sizes = cfg.sizes
    total = sum(sizes.values())
    logd = {lab: np.log(sizes[lab] / total) + multivariate_normal(covariate_mean(cfg, lab), 0.5 * np.eye(P)).logpdf(X)
            for lab in LABELS}
    m = np.maximum.reduce(list(logd.values()))
    ex = {lab: np.exp(v - m) for lab, v in logd.items()}
    tot = sum(ex.values())
    return {lab: v / tot for lab, v in ex.items()}


def oracle_nuisances(ds: TrialDataset, cfg: ScenarioConfig) -> NuisanceFit:
    """The true nuisance functions of the scenario evaluated at every row of ``ds``."""
    X = ds.X
    v = {}
    for z in (0, 1):
        v[f"mu_Y{z}_h1"] = outcome_prob(X, z, "h1", cfg.outcome, cfg.zero_effect)[None]
        v[f"mu_Y{z}_h2"] = outcome_prob(X, z, "h2", cfg.outcome, cfg.zero_effect)[None]
        v[f"mu_D{z}_h1"] = uptake_prob(X, z, "h1")[None]
        v[f"mu_D{z}_h2"] = uptake_prob(X, z, "h2")[None]
        v[f"mu_D{z}_t"] = uptake_prob(X, z, "t")[None]
    for e, r in (("Y", "h1"), ("Y", "h2"), ("D", "h1"), ("D", "h2"), ("D", "t")):
        v[f"d{e}_{r}"] = v[f"mu_{e}1_{r}"] - v[f"mu_{e}0_{r}"]
    for lab, p in true_participation(X, cfg).items():
        v[f"pS_{lab}"] = p[None]
    v["pZ"] = np.full((1, len(ds)), 0.5)
    return NuisanceFit(v, np.zeros(1, bool), {"identity_clamped": 0, "separation": 0, "nonconverged": 0})


# ---------------------------------------------------------------------------


def roles() -> RoleConfig:
    return RoleConfig(target="t", historical1="h1", historical2="h2")


def gen_scenario(cfg: ScenarioConfig, replicate: int = 0) -> TrialDataset:
    """Dataset for replicate ``replicate``; depends only on (cfg.seed, replicate)."""
    rng = make_rng(cfg.seed, replicate, 0)
    parts = []
    for lab in LABELS:
        n = cfg.sizes[lab]
        X = covariate_mean(cfg, lab) + math.sqrt(0.5) * rng.standard_normal((n, P))
        z = (rng.random(n) < 0.5).astype(float)
        d = (rng.random(n) < uptake_prob(X, z, "h2" if lab == "t" else lab)).astype(float)
        py = target_outcome_prob(X, z, cfg) if lab == "t" else outcome_prob(X, z, lab, cfg.outcome, cfg.zero_effect)
        y = (rng.random(n) < py).astype(float)
        parts.append((np.full(n, lab, dtype=object), z, d, y, X))
    s, z, d, y, X = (np.concatenate(v) for v in zip(*parts))
    return TrialDataset.from_arrays(s, z, d, y, X, roles())


@functools.lru_cache(maxsize=64)
def _oracle(outcome, c, zero_effect, draws, seed, chunk=1_000_000) -> tuple[float, float]:
    cfg = ScenarioConfig(outcome=outcome, c=c, zero_effect=zero_effect)
    rng = make_rng(seed, 2**31)
    total = total_sq = 0.0
    done = 0
    mu = covariate_mean(cfg, "t")
    while done < draws:
        m = min(chunk, draws - done)
        X = mu + math.sqrt(0.5) * rng.standard_normal((m, P))
        v = true_cate(X, cfg) * true_cc(X)
        total += v.sum()
        total_sq += (v * v).sum()
        done += m
    mean = total / draws
    var = total_sq / draws - mean * mean
    return float(mean), float(math.sqrt(max(var, 0.0) / draws))


def true_itt_oracle(cfg: ScenarioConfig, draws: int | None = None, seed: int = 0) -> tuple[float, float]:
    """True target ITT by Monte Carlo integration over target covariates.

    Returns ``(value, monte_carlo_se)``; results are cached per configuration.
    """
    return _oracle(cfg.outcome, float(cfg.c), bool(cfg.zero_effect), int(draws or cfg.truth_draws), seed)


# ---------------------------------------------------------------------------


@dataclass
class EstimatorSummary:
    name: str
    mean: float
    percent_bias: float
    bias_mc_se: float
    coverage: float | None
    mean_ci_width: float | None
    n_success: int
    n_failed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimulationReport:
    config: dict
    truth: float
    truth_se: float
    estimators: dict
    seed: int
    runtime_seconds: float = 0.0
    generator: str = GENERATOR_FAMILY
    notes: list = field(default_factory=lambda: [SQRT_NOTE])
    replicates: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "config": self.config, "truth": self.truth, "truth_se": self.truth_se,
            "estimators": {k: v.to_dict() for k, v in self.estimators.items()},
            "seed": self.seed, "generator": self.generator, "notes": self.notes,
            "runtime_seconds": self.runtime_seconds,
        }

    def to_json(self, **kw) -> str:
        kw.setdefault("sort_keys", True)
        kw.setdefault("indent", 2)
        return json.dumps(_finite(self.to_dict()), **kw)

    def write_csv(self, path) -> None:
        cols = ["replicate", "estimator", "point", "se", "ci_lower", "ci_upper", "covered", "error"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.replicates:
                w.writerow(["" if row.get(c) is None else row.get(c) for c in cols])


def _finite(v):
    if isinstance(v, dict):
        return {k: _finite(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_finite(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def summarize_mc(raw: dict, truth: float, config: dict | None = None, seed: int = 0,
                 truth_se: float = 0.0) -> SimulationReport:
    """Percent bias, coverage and Monte Carlo SE per estimator.

    ``raw`` maps estimator name to a list of ``(point, ci_lower, ci_upper)``
    tuples, one per replicate; failed replicates are ``None`` (or have a NaN
    point). Coverage counts replicates whose interval contains ``truth``.
    """
    out = {}
    for name, rows in raw.items():
        if len(rows) < 2:
            raise InsufficientReplicates(f"{name}: need at least 2 replicates, got {len(rows)}")
        ok = [r for r in rows if r is not None and r[0] is not None and math.isfinite(r[0])]
        pts = np.array([r[0] for r in ok], dtype=float)
        if pts.size == 0:
            out[name] = EstimatorSummary(name, math.nan, math.nan, math.nan, None, None, 0, len(rows))
            continue
        mean = float(pts.mean())
        rel = 100.0 / abs(truth) if truth != 0 else math.nan
        pb = (mean - truth) * (100.0 / truth) if truth != 0 else math.nan
        mcse = float(pts.std(ddof=1) / math.sqrt(pts.size)) * rel if pts.size > 1 else math.nan
        cis = [(r[1], r[2]) for r in ok if len(r) > 2 and r[1] is not None and r[2] is not None]
        coverage = width = None
        if cis:
            lo, hi = np.array(cis, dtype=float).T
            coverage = float(np.mean((lo <= truth) & (truth <= hi)))
            width = float(np.mean(hi - lo))
        out[name] = EstimatorSummary(name, mean, float(pb), mcse, coverage, width, int(pts.size),
                                     len(rows) - int(pts.size))
    return SimulationReport(config or {}, float(truth), float(truth_se), out, seed)


def _replicate_seed(cfg: ScenarioConfig, r: int) -> int:
    return int(np.random.SeedSequence(cfg.seed, spawn_key=(r, 1)).generate_state(1, np.uint64)[0])


def run_replicate(cfg: ScenarioConfig, r: int) -> dict:
    """Estimates for replicate ``r``: name -> (point, se, lo, hi) or an error string."""
    ds = gen_scenario(cfg, r)
    seed = _replicate_seed(cfg, r)
    groups: dict = {}
    for name in cfg.estimators:
        method, family, interval = ESTIMATORS[name]
        groups.setdefault((family, interval), []).append(PlanEntry(name, method))
    res: dict = {}
    for (family, interval), plan in sorted(groups.items(), key=lambda kv: str(kv[0])):
        specs = None if family is None else (NuisanceSpecs.spline(cfg.n_knots) if family == "spline"
                                             else NuisanceSpecs.linear())
        boot = BootstrapConfig(cfg.bootstrap, seed) if interval == "bootstrap" and cfg.bootstrap else None
        crossfit = CrossfitPlan(cfg.crossfit, seed) if family == "spline" else CrossfitPlan(1)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out = estimate_plan(ds, specs, plan, crossfit=crossfit, bootstrap=boot, threads=1, seed=seed)
            for e in plan:
                o = out[e.name]
                res[e.name] = (o.point, o.se, *(o.ci if o.ci else (None, None)))
        except (IttBridgeError, np.linalg.LinAlgError, FloatingPointError) as exc:
            for e in plan:
                res[e.name] = f"{type(exc).__name__}: {exc}"
    return res


def _run_one(args):
    cfg, r = args
    return r, run_replicate(cfg, r)


def run_monte_carlo(cfg: ScenarioConfig, threads: int | None = 1, progress=None) -> SimulationReport:
    """Run all replicates (in parallel when ``threads > 1``) and summarize."""
    t0 = time.perf_counter()
    truth, truth_se = true_itt_oracle(cfg)
    jobs = [(cfg, r) for r in range(cfg.replicates)]
    threads = resolve_threads(threads)
    results: dict = {}
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(threads, len(jobs))) as pool:
            for r, res in pool.map(_run_one, jobs):
                results[r] = res
                if progress:
                    progress(r)
    else:
        for job in jobs:
            r, res = _run_one(job)
            results[r] = res
            if progress:
                progress(r)
    raw: dict = {name: [] for name in cfg.estimators}
    rows = []
    for r in range(cfg.replicates):
        for name in cfg.estimators:
            v = results[r][name]
            if isinstance(v, str):
                raw[name].append(None)
                rows.append({"replicate": r, "estimator": name, "error": v})
                continue
            point, se, lo, hi = v
            raw[name].append((point, lo, hi))
            covered = None if lo is None else int(lo <= truth <= hi)
            rows.append({"replicate": r, "estimator": name, "point": repr(point),
                         "se": None if se is None else repr(se),
                         "ci_lower": None if lo is None else repr(lo),
                         "ci_upper": None if hi is None else repr(hi), "covered": covered})
    report = summarize_mc(raw, truth, cfg.to_dict(), cfg.seed, truth_se)
    report.replicates = rows
    report.runtime_seconds = time.perf_counter() - t0
    return report
