"""Model-robust g-computation for hybrid-control trials.

Covariate-adjusted estimation of arm means and treatment effects when a
randomized trial's control arm is augmented with external controls. The
``GC-VS`` estimator borrows external information only where an adaptive
lasso finds no evidence of source-by-covariate interaction.
"""

from .data import EffectMeasure, StudyDataset, StudyRow, load_csv, save_csv, strata_counts
from .errors import (
    CalibrationError,
    ConfigError,
    DataValidationError,
    DomainError,
    FitError,
    HybridGCError,
)
from .estimators import ALL_METHODS, MethodKind, PointEstimates, estimate
from .glm import IDENTITY, LOGIT, Link, fit_mle
from .inference import InferenceReport, analytic_inference, bootstrap, wald_ci
from .lasso import PenalizedFit, fit_penalized, select_interactions
from .simulation import MCSummary, ScenarioSpec, generate, make_scenario, run_mc, true_mu0

__version__ = "0.1.0"

__all__ = [
    "ALL_METHODS", "CalibrationError", "ConfigError", "DataValidationError", "DomainError",
    "EffectMeasure", "FitError", "HybridGCError", "IDENTITY", "InferenceReport", "LOGIT", "Link",
    "MCSummary", "MethodKind", "PenalizedFit", "PointEstimates", "ScenarioSpec", "StudyDataset",
    "StudyRow", "analytic_inference", "bootstrap", "estimate", "fit_mle", "fit_penalized",
    "generate", "load_csv", "make_scenario", "run_mc", "save_csv", "select_interactions",
    "strata_counts", "true_mu0", "wald_ci",
]
