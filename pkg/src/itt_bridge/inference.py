"""Uncertainty quantification: stratified bootstrap, influence-function
variance and cross-fitting plans.

Bootstrap replicate ``b`` draws, for each trial label in sorted order, that
trial's row count of indices with replacement from a generator seeded by the
``b``-th child of ``SeedSequence(seed)``. The generic path refits on the
resampled rows; the batched path turns the same draws into per-row counts
and hands them to weighted fitters, which gives the same likelihoods and
averages without materializing datasets.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .data import TrialDataset
from .errors import (ConfigError, DegenerateVariance, EmptyCellInFold, IttBridgeError,
                     TooManyFailures)
from .results import EstimateResult

GENERATOR_FAMILY = "numpy.random.PCG64 via SeedSequence"
MAX_FAILURE_RATE = 0.10
Z_95 = 1.959963984540054
THREADS_ENV = "ITT_BRIDGE_THREADS"


def make_rng(seed, *spawn_key: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *spawn_key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: the environment variable wins, then ``threads``, then all cores."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("thread count must be at least 1")
    return threads


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 1000
    seed: int = 0
    alpha: float = 0.05
    stratify: bool = True
    chunk: int = 100

    def __post_init__(self):
        if self.replicates < 2:
            raise ConfigError("bootstrap needs at least 2 replicates")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.chunk < 1:
            raise ConfigError("chunk must be positive")

    def to_dict(self) -> dict:
        return {**asdict(self), "ci_method": "percentile", "generator": GENERATOR_FAMILY}


def _strata(ds: TrialDataset, stratify: bool) -> list[np.ndarray]:
    if not stratify:
        return [np.arange(len(ds))]
    return [np.flatnonzero(ds.s == lab) for lab in sorted(set(ds.s.tolist()))]


def bootstrap_indices(ds: TrialDataset, cfg: BootstrapConfig, b: int) -> np.ndarray:
    """Row indices of replicate ``b``; per-trial counts are preserved."""
    rng = make_rng(cfg.seed, b)
    return np.concatenate([rows[rng.integers(0, rows.size, rows.size)] for rows in _strata(ds, cfg.stratify)])


def bootstrap_weights(ds: TrialDataset, cfg: BootstrapConfig, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Resampling counts ``(stop - start, n)`` for replicates ``start..stop``."""
    stop = cfg.replicates if stop is None else stop
    n = len(ds)
    return np.stack([np.bincount(bootstrap_indices(ds, cfg, b), minlength=n).astype(float)
                     for b in range(start, stop)])


def percentile_ci(values: np.ndarray, alpha: float = 0.05) -> tuple[float, float]:
    lo, hi = np.quantile(values, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def _check_failures(n_failed: int, total: int, what: str = "estimator"):
    if n_failed > MAX_FAILURE_RATE * total:
        raise TooManyFailures(f"{what} failed on {n_failed} of {total} bootstrap replicates")


def _as_point(value) -> float:
    return float(value.point if isinstance(value, EstimateResult) else value)


def bootstrap_ci(estimator, ds: TrialDataset, cfg: BootstrapConfig = BootstrapConfig()) -> EstimateResult:
    """Percentile bootstrap around ``estimator(ds)`` by refitting on resampled rows.

    ``estimator`` maps a dataset to a float or an ``EstimateResult``. Replicates
    raising library or linear-algebra errors are counted as failures.
    """
    full = estimator(ds)
    reps = np.full(cfg.replicates, np.nan)
    for b in range(cfg.replicates):
        try:
            reps[b] = _as_point(estimator(ds.take(bootstrap_indices(ds, cfg, b))))
        except (IttBridgeError, np.linalg.LinAlgError, FloatingPointError):
            pass
    return _summarize_replicates(full, reps, cfg)


def _summarize_replicates(full, reps: np.ndarray, cfg: BootstrapConfig, method: str | None = None) -> EstimateResult:
    ok = np.isfinite(reps)
    n_failed = int((~ok).sum())
    _check_failures(n_failed, reps.size, method or "estimator")
    good = reps[ok]
    base = full if isinstance(full, EstimateResult) else EstimateResult(method or "bootstrap", float(full))
    diag = {**base.diagnostics, "bootstrap": {**cfg.to_dict(), "failures": n_failed}}
    return EstimateResult(base.method, base.point, float(good.std(ddof=1)), percentile_ci(good, cfg.alpha),
                          base.estimand, diag, base.components)


def _run_chunk(args):
    fn, ds, cfg, start, stop = args
    W = bootstrap_weights(ds, cfg, start, stop)
    return start, fn(ds, W)


def batched_bootstrap(fn, ds: TrialDataset, cfg: BootstrapConfig, threads: int | None = 1) -> dict:
    """Replicate arrays from ``fn(ds, W) -> {name: (B,) array}`` over all replicates.

    Replicates are processed in chunks of ``cfg.chunk`` rows of ``W``, in
    parallel when ``threads > 1``; results are placed by replicate index so the
    output does not depend on scheduling. NaN marks a failed replicate.
    """
    bounds = [(a, min(a + cfg.chunk, cfg.replicates)) for a in range(0, cfg.replicates, cfg.chunk)]
    jobs = [(fn, ds, cfg, a, b) for a, b in bounds]
    threads = resolve_threads(threads)
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(threads, len(jobs))) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    out: dict = {}
    for start, res in parts:
        for name, arr in res.items():
            out.setdefault(name, np.full(cfg.replicates, np.nan))[start:start + arr.size] = arr
    return out


def bootstrap_result(full: EstimateResult, reps: np.ndarray, cfg: BootstrapConfig) -> EstimateResult:
    """Attach a percentile CI built from replicate estimates to ``full``."""
    return _summarize_replicates(full, reps, cfg, full.method)


def eif_standard_error(eif: np.ndarray, weights: np.ndarray | None = None) -> float:
    """sqrt(mean(EIF^2) / n); ``weights`` are row multiplicities."""
    eif = np.asarray(eif, dtype=float)
    w = np.ones_like(eif) if weights is None else np.asarray(weights, dtype=float)
    n = w.sum()
    var = float((w * eif * eif).sum() / n / n)
    if not np.isfinite(var) or var <= 0.0:
        raise DegenerateVariance("estimated influence-function variance is zero or non-finite")
    return float(np.sqrt(var))


def eif_variance_ci(eif: np.ndarray, point: float, method: str = "eif", alpha: float = 0.05,
                    weights=None, diagnostics: dict | None = None) -> EstimateResult:
    """Wald interval ``point +/- z * SE`` with SE from the estimated influence function."""
    se = eif_standard_error(eif, weights)
    from scipy.stats import norm
    zq = Z_95 if alpha == 0.05 else float(norm.ppf(1 - alpha / 2))
    return EstimateResult(method, float(point), se, (point - zq * se, point + zq * se),
                          diagnostics=dict(diagnostics or {}))


@dataclass(frozen=True)
class CrossfitPlan:
    """K-fold assignment stratified within every (trial, arm) cell."""

    n_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_folds < 1:
            raise ConfigError("fold count must be at least 1")

    def assign(self, ds: TrialDataset, required=None) -> np.ndarray | None:
        """Fold id per row, or None when ``n_folds == 1``.

        ``required`` lists the (label, z) cells that models are fit on; each
        must hold at least ``n_folds`` rows so that every training split keeps
        it non-empty. By default every cell with an observed arm is required.
        """
        if self.n_folds == 1:
            return None
        K = self.n_folds
        rng = make_rng(self.seed)
        folds = np.empty(len(ds), dtype=int)
        zkey = np.where(np.isnan(ds.z), -1, ds.z).astype(int)
        cells = sorted({(str(s), int(z)) for s, z in zip(ds.s, zkey)})
        for lab, z in cells:
            rows = np.flatnonzero((ds.s == lab) & (zkey == z))
            needed = (lab, z) in required if required is not None else z >= 0
            if needed and rows.size < K:
                raise EmptyCellInFold(f"cell (trial {lab!r}, Z={z}) has {rows.size} rows, fewer than {K} folds")
            folds[rng.permutation(rows)] = np.arange(rows.size) % K
        return folds

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "seed": self.seed, "generator": GENERATOR_FAMILY}


@dataclass
class CrossFit:
    folds: np.ndarray | None
    nuisance: object   # NuisanceFit


def cross_fit(plan: CrossfitPlan, ds: TrialDataset, specs, methods=("eif-design",), assignment=None,
              W=None) -> CrossFit:
    """Out-of-fold nuisance predictions for the cells ``methods`` need.

    With ``plan.n_folds == 1`` this is the full-sample fit.
    """
    from .estimators import plan_requirements
    from .nuisance import fit_nuisance_batch

    cells, participation = plan_requirements(ds, methods)
    required = {(ds.config.roles()[role], z) for _, z, role in cells}
    folds = plan.assign(ds, required)
    nf = fit_nuisance_batch(ds, specs, cells, participation=participation, assignment=assignment,
                            W=W, folds=folds)
    return CrossFit(folds, nf)
