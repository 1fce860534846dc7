"""Standard errors and confidence intervals.

Analytic variances use the influence-function expansion of a g-computation
mean. For an arm mean built from coefficients ``b`` the per-subject
contribution is::

    z_i * (h((1, x_i')b) - mu) / tau + r(b)' psi_i

where ``tau = n1/n``, ``r(b)`` is the z = 1 average of
``hdot((1, x')b) (1, x')`` and ``psi_i`` is the main-block part of the
M-estimation influence function ``M^{-1} U_i`` of the fitting equations.
Variances are plug-in (empirical, divisor ``n``) and divided by ``n``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import EffectMeasure, StudyDataset, as_effect
from .errors import FitError, HybridGCError
from .estimators import ArmModel, MethodKind, PointEstimates, estimate
from .glm import Design, Link, main_columns, make_design

log = logging.getLogger(__name__)

DEFAULT_BOOT_REPS = 1000
MAX_BOOT_FAILURE_RATE = 0.05


def wald_ci(est: float, se: float, alpha: float = 0.05) -> tuple[float, float]:
    """``est -/+ z_{1-alpha/2} * se``."""
    if se < 0:
        raise ValueError("standard error must be nonnegative")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    q = float(norm.ppf(1.0 - alpha / 2.0))
    return est - q * se, est + q * se


# ------------------------------------------------------------------ #
# Influence functions
# ------------------------------------------------------------------ #

_VARIANT_STRATUM = {
    "rct": "internal_control",
    "ni": "all_control",
    "vs": "all_control",
    "treated": "internal_treated",
}


def arm_design(d: StudyDataset, arm: ArmModel) -> Design:
    """Design of the estimating equation behind ``arm``."""
    stratum = _VARIANT_STRATUM[arm.variant]
    if arm.intercept_only:
        return make_design(d, stratum, intercept_only=True)
    return make_design(d, stratum, arm.active_set if arm.variant == "vs" else ())


def influence_rows(
    d: StudyDataset, design: Design, theta: np.ndarray, link: Link
) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject ``M^{-1} U_i`` for all n subjects and the matrix ``M``.

    ``U_i = 1{i in stratum} (y_i - h(d_i'theta)) d_i`` and
    ``M = n^{-1} sum_i 1{i in stratum} hdot(d_i'theta) d_i d_i'``. Rows
    outside the stratum are exactly zero.
    """
    n = d.n
    D = design.matrix
    eta = D @ theta
    U = (d.y[design.mask] - link.h(eta))[:, None] * D
    M = D.T @ (D * link.hdot(eta)[:, None]) / n
    M = 0.5 * (M + M.T)
    out = np.zeros((n, D.shape[1]))
    out[design.mask] = np.linalg.solve(M, U.T).T
    return out, M


def influence_psi(d: StudyDataset, arm: ArmModel) -> np.ndarray:
    """Main-block influence rows ``psi_i`` of the coefficients used by ``arm``.

    For GC-VS the selected set is treated as fixed: the equations are those
    of the pooled-control model carrying only the selected interactions.
    """
    design = arm_design(d, arm)
    rows, _ = influence_rows(d, design, arm.theta, arm.link)
    n_main = 1 if arm.intercept_only else d.p + 1
    return rows[:, :n_main]


def r_vector(d: StudyDataset, arm: ArmModel) -> np.ndarray:
    """z = 1 average of ``hdot((1, x')coef) (1, x')``."""
    if arm.intercept_only:
        return np.atleast_1d(arm.link.hdot(arm.coef[0])).astype(float)
    X1 = main_columns(d.x[d.z == 1])
    return (arm.link.hdot(X1 @ arm.coef)[:, None] * X1).mean(axis=0)


def g_bracket(d: StudyDataset, arm: ArmModel, mu: float) -> np.ndarray:
    """``z_i (h((1, x_i')coef) - mu) / tau`` for every subject."""
    tau = d.n1 / d.n
    out = np.zeros(d.n)
    internal = d.z == 1
    if arm.intercept_only:
        fitted = np.full(int(internal.sum()), float(arm.link.h(arm.coef[0])))
    else:
        fitted = arm.link.h(main_columns(d.x[internal]) @ arm.coef)
    out[internal] = (fitted - mu) / tau
    return out


@dataclass(frozen=True, eq=False)
class InfluenceIngredients:
    tau_hat: float
    r_beta: np.ndarray
    r_alpha: np.ndarray
    M_inv: np.ndarray
    per_subject_psi: np.ndarray
    per_subject_phi: np.ndarray
    bracket0: np.ndarray
    bracket1: np.ndarray

    @property
    def if_mu0(self) -> np.ndarray:
        return self.bracket0 + self.per_subject_psi @ self.r_beta

    @property
    def if_mu1(self) -> np.ndarray:
        return self.bracket1 + self.per_subject_phi @ self.r_alpha


def ingredients(d: StudyDataset, est: PointEstimates) -> InfluenceIngredients:
    control, treated = est.control, est.treated
    design = arm_design(d, control)
    rows, M = influence_rows(d, design, control.theta, control.link)
    n_main = 1 if control.intercept_only else d.p + 1
    return InfluenceIngredients(
        tau_hat=d.n1 / d.n,
        r_beta=r_vector(d, control),
        r_alpha=r_vector(d, treated),
        M_inv=np.linalg.inv(M),
        per_subject_psi=rows[:, :n_main],
        per_subject_phi=influence_psi(d, treated),
        bracket0=g_bracket(d, control, est.mu0),
        bracket1=g_bracket(d, treated, est.mu1),
    )


def _se(values: np.ndarray) -> float:
    return math.sqrt(float(np.var(values)) / len(values))


def var_mu0(d: StudyDataset, est: PointEstimates, ing: InfluenceIngredients | None = None) -> float:
    """Analytic standard error of the control-arm mean."""
    ing = ing or ingredients(d, est)
    return _se(ing.if_mu0)


def var_mu1(d: StudyDataset, est: PointEstimates, ing: InfluenceIngredients | None = None) -> float:
    ing = ing or ingredients(d, est)
    return _se(ing.if_mu1)


def var_delta(d: StudyDataset, est: PointEstimates, ing: InfluenceIngredients | None = None) -> float:
    """Analytic standard error of ``g(mu1) - g(mu0)`` by the delta method."""
    ing = ing or ingredients(d, est)
    g0 = est.effect.gdot(est.mu0)
    g1 = est.effect.gdot(est.mu1)
    return _se(g1 * ing.if_mu1 - g0 * ing.if_mu0)


# ------------------------------------------------------------------ #
# Reports
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class InferenceReport:
    se_mu0: float
    se_mu1: float
    se_delta: float
    ci_mu0: tuple[float, float]
    ci_mu1: tuple[float, float]
    ci_delta: tuple[float, float]
    se_method: str
    alpha: float = 0.05
    boot_reps: int | None = None
    boot_failures: int = 0


def _report(est: PointEstimates, ses, method: str, alpha: float, **extra) -> InferenceReport:
    se0, se1, sed = ses
    return InferenceReport(
        se_mu0=se0,
        se_mu1=se1,
        se_delta=sed,
        ci_mu0=wald_ci(est.mu0, se0, alpha),
        ci_mu1=wald_ci(est.mu1, se1, alpha),
        ci_delta=wald_ci(est.delta, sed, alpha),
        se_method=method,
        alpha=alpha,
        **extra,
    )


def analytic_inference(d: StudyDataset, est: PointEstimates, alpha: float = 0.05) -> InferenceReport:
    ing = ingredients(d, est)
    ses = (var_mu0(d, est, ing), var_mu1(d, est, ing), var_delta(d, est, ing))
    return _report(est, ses, "analytic", alpha)


def stratified_resample(d: StudyDataset, rng: np.random.Generator) -> np.ndarray:
    """Row indices resampled with replacement within (z=1,a=1), (z=1,a=0), (z=0)."""
    parts = []
    for mask in ((d.z == 1) & (d.a == 1), (d.z == 1) & (d.a == 0), d.z == 0):
        idx = np.flatnonzero(mask)
        if len(idx):
            parts.append(idx[rng.integers(0, len(idx), size=len(idx))])
    return np.sort(np.concatenate(parts))


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for replicate ``index`` of master ``seed``."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def _boot_one(d, method, effect, link, seed, b):
    rng = replicate_rng(seed, b)
    idx = stratified_resample(d, rng)
    try:
        est = estimate(d.subset(idx), method, effect, link, rng=rng)
    except (HybridGCError, np.linalg.LinAlgError) as exc:
        return f"{type(exc).__name__}: {exc}"
    return est.mu0, est.mu1, est.delta


def _boot_chunk(args):
    d, method, effect, link, seed, indices = args
    return [_boot_one(d, method, effect, link, seed, b) for b in indices]


def bootstrap(
    d: StudyDataset,
    method: MethodKind | str,
    effect: EffectMeasure | str = "difference",
    link: Link | None = None,
    B: int = DEFAULT_BOOT_REPS,
    seed: int = 0,
    alpha: float = 0.05,
    estimate_on_full: PointEstimates | None = None,
    min_reps: int = 100,
    threads: int = 1,
) -> tuple[InferenceReport, np.ndarray]:
    """Stratified nonparametric bootstrap of the whole estimation pipeline.

    Each replicate resamples within the three (source, arm) strata, keeping
    their sizes, and reruns the chosen method (for GC-VS including the
    cross-validated adaptive lasso). Replicate streams are derived from
    ``(seed, replicate index)``, so results do not depend on ``threads``.

    Returns the report (Wald intervals around the full-data estimate using
    the replicate standard deviations) and the ``(B_ok, 3)`` array of
    replicate ``(mu0, mu1, delta)``.

    Raises:
        ValueError: ``B < min_reps``.
        FitError: more than 5% of replicates failed.
    """
    if B < min_reps:
        raise ValueError(f"bootstrap needs at least {min_reps} replicates")
    method = MethodKind.parse(method)
    effect = as_effect(effect)
    full = estimate_on_full or estimate(d, method, effect, link, rng=replicate_rng(seed, B))
    if threads <= 1:
        results = [_boot_one(d, method, effect, link, seed, b) for b in range(B)]
    else:
        chunks = [range(i, min(i + 20, B)) for i in range(0, B, 20)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(_boot_chunk, [(d, method, effect, link, seed, c) for c in chunks])
            results = [r for part in parts for r in part]
    draws = []
    failures = 0
    for b, r in enumerate(results):
        if isinstance(r, str):
            failures += 1
            log.debug("bootstrap replicate %d failed: %s", b, r)
        else:
            draws.append(r)
    if failures > MAX_BOOT_FAILURE_RATE * B:
        raise FitError(f"{failures} of {B} bootstrap replicates failed", model=method.value)
    arr = np.array(draws)
    ses = tuple(float(s) for s in np.std(arr, axis=0, ddof=1))
    report = _report(full, ses, "bootstrap", alpha, boot_reps=len(draws), boot_failures=failures)
    return report, arr
