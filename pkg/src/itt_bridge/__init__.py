"""Bridging historical placebo-controlled trials to an active-controlled target trial.

Estimates the intention-to-treat effect the target trial would have shown
against placebo, from conditional Wald ratios in historical trials and
compliance in the target population, with regression and debiased
(influence-function) estimators, bounds, sensitivity analyses and a
simulation harness.
"""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.1.0"

from .data import RoleConfig, TrialDataset, load_dataset, split_by_trial, validate_dataset, write_dataset
from .errors import IttBridgeError
from .estimators import (SensitivityParameter, counterfactual_placebo_incidence, estimate_difference_in_means,
                         estimate_itt_constancy, estimate_itt_eif_design, estimate_itt_eif_posthoc,
                         estimate_itt_g_estimation, estimate_itt_no_crossover, estimate_itt_reg_design,
                         estimate_itt_reg_posthoc, estimate_plan)
from .inference import BootstrapConfig, CrossfitPlan, bootstrap_ci, cross_fit, eif_variance_ci
from .nuisance import GlmSpec, NuisanceSpecs, fit_delta, fit_glm, fit_participation
from .results import EstimateResult, clamp_estimate
