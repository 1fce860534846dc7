"""Adaptive-lasso fit of the pooled-control model with source interactions.

The working model on all control rows has linear predictor
``(1, X')beta + (1 - Z)(1, X')gamma``. Only ``gamma`` is penalized, with
weights ``1/|gamma_ml_j|`` taken from separate internal/external ML fits.
The objective is scaled by the number of control rows ``n_c``::

    loss(beta, gamma) / n_c + lam * sum_j w_j |gamma_j|

where ``loss`` is RSS/2 for the identity link and the Bernoulli negative
log-likelihood for the logit link. ``lam`` is chosen by K-fold
cross-validation on held-out deviance (minimum rule).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _cd
from .data import StudyDataset
from .errors import ConvergenceError, DataValidationError, RankDeficientError, SeparationError
from .glm import (
    SEPARATION_BOUND,
    GlmFit,
    Link,
    check_rank,
    design_external_control,
    design_internal_control,
    design_pooled_control_full,
    design_pooled_control_ni,
    fit_mle,
    irls,
)

WEIGHT_CAP = 1e10
GAMMA_FLOOR = 1e-10
N_LAMBDA = 100
LAMBDA_MIN_RATIO = 1e-4
LAMBDA_MAX_SLACK = 1e-9
LAMBDA_MAX_FLOOR = 1e-12
DEFAULT_FOLDS = 10
# Inner tolerance is tighter than the customary 1e-7 so that lam = 0 reproduces
# the unpenalized MLE to well within 1e-6 even for correlated columns.
INNER_TOL = 1e-10
OUTER_TOL = 1e-8
MAX_OUTER = 100
MAX_SWEEPS = 100_000


class DegeneratePathWarning(UserWarning):
    """All adaptive weights sit at the cap, so the path collapses to one value."""


@dataclass(frozen=True, eq=False)
class PenaltyWeights:
    """Adaptive-lasso weights for the interaction block.

    Attributes:
        w: one weight per interaction column (length ``p + 1``).
        gamma_ml: the unpenalized interaction estimates the weights came from.
    """

    w: np.ndarray
    gamma_ml: np.ndarray

    @property
    def all_capped(self) -> bool:
        return bool(np.all(self.w >= WEIGHT_CAP))

    def full(self, n_main: int) -> np.ndarray:
        """Penalty factors over the whole coefficient vector (main block unpenalized)."""
        return np.concatenate([np.zeros(n_main), self.w])


@dataclass(frozen=True)
class CVTrace:
    lambdas: np.ndarray
    mean_deviance: np.ndarray
    fold_sd: np.ndarray
    fold_deviance: np.ndarray
    best_index: int


@dataclass(frozen=True, eq=False)
class PenalizedFit:
    """Solution of the penalized pooled-control model at one ``lam``.

    ``active_set`` holds 0-based indices of nonzero interaction coefficients,
    index 0 being the intercept shift.
    """

    beta_vs: np.ndarray
    gamma_vs: np.ndarray
    lam: float
    active_set: tuple[int, ...]
    objective: float
    link: Link
    weights: PenaltyWeights
    n_control: int
    cv_trace: CVTrace | None = None
    path: np.ndarray | None = field(default=None, repr=False)

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([self.beta_vs, self.gamma_vs])


# ------------------------------------------------------------------ #
# Weights and lambda grid
# ------------------------------------------------------------------ #


def ml_interactions(d: StudyDataset, link: Link) -> tuple[GlmFit, GlmFit, np.ndarray]:
    """Separate internal- and external-control ML fits and their difference.

    Returns ``(internal_fit, external_fit, gamma_ml)`` with
    ``gamma_ml = beta_ec_ml - beta_ml``.
    """
    internal = fit_mle(d, design_internal_control(d), link)
    external = fit_mle(d, design_external_control(d), link)
    return internal, external, external.coef - internal.coef


def adaptive_weights(gamma_ml: np.ndarray | GlmFit) -> PenaltyWeights:
    """Weights ``1/|gamma_ml_j|``, capped at ``WEIGHT_CAP`` for near-zero estimates.

    Accepts either the interaction estimates themselves or a fit of the full
    pooled-control design, whose trailing block holds them.
    """
    if isinstance(gamma_ml, GlmFit):
        design = gamma_ml.design
        if design is None or not design.interactions:
            raise ValueError("fit does not carry an interaction block")
        gamma_ml = gamma_ml.coef[design.n_main:]
    g = np.asarray(gamma_ml, dtype=float).copy()
    mag = np.abs(g)
    w = np.full_like(mag, WEIGHT_CAP)
    ok = mag >= GAMMA_FLOOR
    w[ok] = np.minimum(1.0 / mag[ok], WEIGHT_CAP)
    return PenaltyWeights(w=w, gamma_ml=g)


def _full_problem(d: StudyDataset) -> tuple[np.ndarray, np.ndarray, int]:
    design = design_pooled_control_full(d)
    check_rank(design.matrix, model=design.name)
    return design.matrix, d.y[design.mask], design.n_main


def _ni_start(d: StudyDataset, link: Link) -> np.ndarray:
    ni = fit_mle(d, design_pooled_control_ni(d), link)
    return np.concatenate([ni.coef, np.zeros(d.p + 1)])


def _neg_grad(D: np.ndarray, y: np.ndarray, link: Link, theta: np.ndarray) -> np.ndarray:
    """Negative gradient of ``loss/n``: ``D'(y - h(D theta)) / n``."""
    return D.T @ (y - link.h(D @ theta)) / len(y)


def lambda_max(d: StudyDataset, link: Link, weights: PenaltyWeights) -> float:
    """Smallest ``lam`` at which every interaction is shrunk to zero.

    The analytic value is inflated by a relative ``1e-9`` (and floored at
    ``1e-12``) so that rounding in the solver cannot leave a spurious
    nonzero at ``lambda_max`` itself.
    """
    D, y, n_main = _full_problem(d)
    theta = _ni_start(d, link)
    grad = _neg_grad(D, y, link, theta)[n_main:]
    raw = float(np.max(np.abs(grad) / weights.w))
    return max(raw * (1.0 + LAMBDA_MAX_SLACK), LAMBDA_MAX_FLOOR)


def lambda_path(
    weights: PenaltyWeights,
    d: StudyDataset,
    link: Link,
    n_lambda: int = N_LAMBDA,
    min_ratio: float = LAMBDA_MIN_RATIO,
) -> np.ndarray:
    """Log-spaced grid from ``lambda_max`` down to ``min_ratio * lambda_max``.

    When every weight is capped the path is degenerate; a single value is
    returned and :class:`DegeneratePathWarning` is issued.
    """
    lmax = lambda_max(d, link, weights)
    if weights.all_capped or lmax <= 0:
        warnings.warn("all adaptive weights are capped; lambda path is degenerate",
                      DegeneratePathWarning, stacklevel=2)
        return np.array([lmax])
    return np.geomspace(lmax, min_ratio * lmax, n_lambda)


# ------------------------------------------------------------------ #
# Solvers
# ------------------------------------------------------------------ #


def _objective(D, y, link, theta, pen_full, lam) -> float:
    dev = link.deviance(y, D @ theta)
    return 0.5 * dev / len(y) + lam * float(pen_full @ np.abs(theta))


def _run_path(D, y, link, pen_full, lambdas, theta0):
    coefs, status, _ = _cd.solve_path(
        np.ascontiguousarray(D), np.ascontiguousarray(y, dtype=float), link.kind == "logit",
        pen_full, np.ascontiguousarray(lambdas, dtype=float), theta0.astype(float),
        INNER_TOL, OUTER_TOL, MAX_OUTER, MAX_SWEEPS, SEPARATION_BOUND,
    )
    return coefs, status


def _raise_status(status: int, model: str):
    if status == _cd.STATUS_DIVERGED:
        raise SeparationError("penalized coefficients diverged", model=model)
    raise ConvergenceError("penalized solver did not converge", model=model)


def _make_fit(D, y, link, weights, n_main, theta, lam, cv_trace=None, path=None):
    pen_full = weights.full(n_main)
    beta = theta[:n_main].copy()
    gamma = theta[n_main:].copy()
    active = tuple(int(j) for j in np.flatnonzero(gamma != 0.0))
    return PenalizedFit(
        beta_vs=beta,
        gamma_vs=gamma,
        lam=float(lam),
        active_set=active,
        objective=_objective(D, y, link, theta, pen_full, lam),
        link=link,
        weights=weights,
        n_control=len(y),
        cv_trace=cv_trace,
        path=path,
    )


def fit_penalized(d: StudyDataset, link: Link, weights: PenaltyWeights, lam: float) -> PenalizedFit:
    """Single-``lam`` adaptive-lasso solve over all control rows.

    The solver starts from the no-interaction fit ``(beta_ni, 0)``.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    D, y, n_main = _full_problem(d)
    theta0 = _ni_start(d, link)
    coefs, status = _run_path(D, y, link, weights.full(n_main), np.array([lam]), theta0)
    if status[0] != _cd.STATUS_OK:
        _raise_status(status[0], "pooled_control_full")
    return _make_fit(D, y, link, weights, n_main, coefs[0], lam)


def kkt_residual(d: StudyDataset, fit: PenalizedFit) -> float:
    """Largest violation of the lasso optimality conditions at ``fit``.

    Unpenalized coordinates need a zero gradient; active penalized ones need
    ``grad_j = lam w_j sign(gamma_j)``; inactive ones ``|grad_j| <= lam w_j``.
    """
    D, y, n_main = _full_problem(d)
    g = _neg_grad(D, y, fit.link, fit.coef)
    worst = float(np.max(np.abs(g[:n_main])))
    pen = fit.lam * fit.weights.w
    for j, gj in enumerate(g[n_main:]):
        coef = fit.gamma_vs[j]
        if coef != 0.0:
            worst = max(worst, abs(gj - pen[j] * np.sign(coef)))
        else:
            worst = max(worst, max(0.0, abs(gj) - pen[j]))
    return worst


def _control_folds(d: StudyDataset, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold labels for control rows, assigned within each source."""
    ctrl = d.a == 0
    z_c = d.z[ctrl]
    folds = np.empty(int(ctrl.sum()), dtype=np.int64)
    for src in (1, 0):
        idx = np.flatnonzero(z_c == src)
        perm = rng.permutation(len(idx))
        folds[idx[perm]] = np.arange(len(idx)) % k
    return folds


def cross_validate(
    d: StudyDataset,
    link: Link,
    weights: PenaltyWeights,
    path: np.ndarray,
    k: int = DEFAULT_FOLDS,
    rng: np.random.Generator | None = None,
) -> PenalizedFit:
    """K-fold CV over control rows (folds stratified by source).

    The ``lam`` minimizing mean held-out deviance is selected and the solution
    at that grid point on the full warm-started path is returned.

    Raises:
        DataValidationError: ``k < 2`` or ``k`` exceeds the control count.
        RankDeficientError: a training fold loses a source stratum.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if k < 2:
        raise DataValidationError("cross-validation needs at least 2 folds")
    D, y, n_main = _full_problem(d)
    n_c = len(y)
    if k > n_c:
        raise DataValidationError(f"{k} folds requested for {n_c} control rows")
    z_c = d.z[d.a == 0]
    if min(np.sum(z_c == 1), np.sum(z_c == 0)) < 2:
        raise RankDeficientError("a training fold would lack a source stratum",
                                 model="cross-validation")
    pen_full = weights.full(n_main)
    path = np.asarray(path, dtype=float)
    theta0 = _ni_start(d, link)
    folds = _control_folds(d, k, rng)

    fold_dev = np.full((k, len(path)), np.inf)
    fold_n = np.zeros(k)
    for f in range(k):
        train = folds != f
        test = ~train
        Dt, yt = D[train], y[train]
        try:
            check_rank(Dt, model=f"cv fold {f}")
            start = np.concatenate([
                fit_mle_arrays(Dt[:, :n_main], yt, link), np.zeros(D.shape[1] - n_main)
            ])
        except (RankDeficientError, SeparationError, ConvergenceError) as exc:
            raise RankDeficientError(f"training fold {f} cannot be fit: {exc}",
                                     model="cross-validation") from exc
        coefs, status = _run_path(Dt, yt, link, pen_full, path, start)
        eta = D[test] @ coefs.T
        dev = link.pointwise_deviance(y[test][:, None], eta)
        fold_dev[f] = np.where(status == _cd.STATUS_OK, dev.sum(axis=0), np.inf)
        fold_n[f] = test.sum()

    mean_dev = fold_dev.sum(axis=0) / n_c
    with np.errstate(invalid="ignore"):
        per_fold = fold_dev / fold_n[:, None]
        sd = np.std(per_fold, axis=0, ddof=1) / np.sqrt(k)
    best = int(np.argmin(mean_dev))
    if not np.isfinite(mean_dev[best]):
        raise ConvergenceError("no lambda on the path could be fit in every fold",
                               model="cross-validation")

    coefs, status = _run_path(D, y, link, pen_full, path[: best + 1], theta0)
    if status[best] != _cd.STATUS_OK:
        _raise_status(status[best], "pooled_control_full")
    trace = CVTrace(path, mean_dev, sd, fold_dev, best)
    return _make_fit(D, y, link, weights, n_main, coefs[best], path[best], trace, coefs)


def fit_mle_arrays(D: np.ndarray, y: np.ndarray, link: Link) -> np.ndarray:
    coef, converged, _, _ = irls(D, y, link, check=False)
    if not converged:
        raise ConvergenceError("IRLS did not converge")
    return coef


def select_interactions(
    d: StudyDataset,
    link: Link,
    rng: np.random.Generator | None = None,
    k: int = DEFAULT_FOLDS,
    n_lambda: int = N_LAMBDA,
) -> PenalizedFit:
    """Weights, lambda grid and cross-validated adaptive-lasso fit in one call."""
    _, _, gamma_ml = ml_interactions(d, link)
    weights = adaptive_weights(gamma_ml)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneratePathWarning)
        path = lambda_path(weights, d, link, n_lambda=n_lambda)
    return cross_validate(d, link, weights, path, k=k, rng=rng)
