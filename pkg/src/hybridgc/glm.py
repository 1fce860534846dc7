"""Maximum-likelihood fitting of canonical-link GLMs on dataset strata.

Two links are supported: identity (Gaussian working model) and logit
(Bernoulli working model). Because both are canonical, the score equations
are residual-orthogonality conditions ``sum_i (y_i - h(d_i'theta)) d_i = 0``
and the observed and expected information coincide.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .data import StudyDataset
from .errors import ConvergenceError, EmptyStratumError, RankDeficientError, SeparationError

LinkKind = Literal["identity", "logit"]

MAX_ITER = 100
DEVIANCE_TOL = 1e-8
SCORE_TOL = 1e-10
SEPARATION_BOUND = 30.0
RANK_TOL = 1e-10


@dataclass(frozen=True)
class Link:
    """Inverse link ``h`` and its derivative for a canonical link."""

    kind: LinkKind = "identity"

    def __post_init__(self):
        if self.kind not in ("identity", "logit"):
            raise ValueError(f"unsupported link {self.kind!r}")

    def h(self, u):
        u = np.asarray(u, dtype=float)
        return u.copy() if self.kind == "identity" else expit(u)

    def hdot(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "identity":
            return np.ones_like(u)
        m = expit(u)
        return m * (1.0 - m)

    def deviance(self, y: np.ndarray, eta: np.ndarray) -> float:
        """Gaussian residual sum of squares or Bernoulli deviance."""
        if self.kind == "identity":
            r = y - eta
            return float(r @ r)
        return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))

    def pointwise_deviance(self, y: np.ndarray, eta: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return (y - eta) ** 2
        return 2.0 * (np.logaddexp(0.0, eta) - y * eta)


IDENTITY = Link("identity")
LOGIT = Link("logit")


def link_for(outcome_kind: str) -> Link:
    """Identity link for continuous outcomes, logit for binary ones."""
    return LOGIT if outcome_kind == "binary" else IDENTITY


# ------------------------------------------------------------------ #
# Designs
# ------------------------------------------------------------------ #

STRATA = ("internal_control", "external_control", "internal_treated", "all_control", "internal")


def stratum_mask(d: StudyDataset, stratum: str) -> np.ndarray:
    if stratum == "internal_control":
        return (d.z == 1) & (d.a == 0)
    if stratum == "external_control":
        return d.z == 0
    if stratum == "internal_treated":
        return (d.z == 1) & (d.a == 1)
    if stratum == "all_control":
        return d.a == 0
    if stratum == "internal":
        return d.z == 1
    raise ValueError(f"unknown stratum {stratum!r}")


@dataclass(frozen=True, eq=False)
class Design:
    """Rows and columns of one working model.

    ``matrix`` has one row per stratum member (in dataset order). The first
    ``1 + p`` columns are ``(1, X')``; any further columns are the source
    interactions ``(1 - Z)(1, X')_J`` for ``J = interactions``.
    """

    name: str
    mask: np.ndarray
    matrix: np.ndarray
    interactions: tuple[int, ...]
    intercept_only: bool = False

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_main(self) -> int:
        return 1 if self.intercept_only else self.width - len(self.interactions)


def main_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    return np.column_stack([np.ones(len(x)), x])


def make_design(
    d: StudyDataset,
    stratum: str,
    interactions: Iterable[int] = (),
    intercept_only: bool = False,
    name: str | None = None,
) -> Design:
    """Build a design on ``stratum`` with optional source interactions.

    Args:
        interactions: 0-based indices into ``(1, X')`` whose products with
            ``(1 - Z)`` are appended (index 0 is the intercept shift).
        intercept_only: use a single column of ones.

    Raises:
        EmptyStratumError: if no rows fall in the stratum.
    """
    mask = stratum_mask(d, stratum)
    label = name or stratum
    if not mask.any():
        raise EmptyStratumError("stratum has no rows", model=label)
    J = tuple(sorted(set(int(j) for j in interactions)))
    if any(j < 0 or j > d.p for j in J):
        raise ValueError(f"interaction indices must lie in 0..{d.p}")
    if intercept_only:
        if J:
            raise ValueError("intercept-only designs cannot carry interactions")
        mat = np.ones((int(mask.sum()), 1))
    else:
        base = main_columns(d.x[mask])
        if J:
            ext = (1.0 - d.z[mask]).astype(float)[:, None] * base[:, list(J)]
            mat = np.column_stack([base, ext])
        else:
            mat = base
    return Design(label, mask, np.ascontiguousarray(mat), J, intercept_only)


def design_internal_control(d: StudyDataset) -> Design:
    return make_design(d, "internal_control")


def design_external_control(d: StudyDataset) -> Design:
    return make_design(d, "external_control")


def design_internal_treated(d: StudyDataset) -> Design:
    return make_design(d, "internal_treated")


def design_pooled_control_full(d: StudyDataset) -> Design:
    return make_design(d, "all_control", range(d.p + 1), name="pooled_control_full")


def design_pooled_control_ni(d: StudyDataset) -> Design:
    return make_design(d, "all_control", name="pooled_control_ni")


def design_oracle(d: StudyDataset, J: Iterable[int]) -> Design:
    """Pooled-control design with interactions restricted to ``J`` (0-based)."""
    return make_design(d, "all_control", J, name="pooled_control_oracle")


# ------------------------------------------------------------------ #
# Fitting
# ------------------------------------------------------------------ #


@dataclass(frozen=True, eq=False)
class GlmFit:
    """Result of one maximum-likelihood fit.

    ``info_matrix`` is the (unscaled) expected information
    ``sum_i hdot(d_i'coef) d_i d_i'`` over the fitted rows; ``score`` is the
    final residual-orthogonality vector ``sum_i (y_i - h(d_i'coef)) d_i``.
    """

    coef: np.ndarray
    link: Link
    converged: bool
    n_iter: int
    deviance: float
    deviance_trace: tuple[float, ...]
    info_matrix: np.ndarray
    score: np.ndarray
    stratum_mask: np.ndarray
    design: Design | None = None

    @property
    def n_obs(self) -> int:
        return int(self.stratum_mask.sum())


def check_rank(D: np.ndarray, model: str = "") -> None:
    """Raise :class:`RankDeficientError` unless ``D`` has full column rank.

    Uses a column-pivoted QR with a relative pivot threshold.
    """
    n, k = D.shape
    if n < k:
        raise RankDeficientError(f"{n} rows for {k} columns", model=model)
    R = scipy.linalg.qr(D, mode="r", pivoting=True, check_finite=False)[0]
    diag = np.abs(np.diag(R))
    if diag[0] == 0 or diag[-1] <= RANK_TOL * diag[0]:
        raise RankDeficientError("design matrix is rank deficient", model=model)


def irls(
    D: np.ndarray,
    y: np.ndarray,
    link: Link,
    max_iter: int = MAX_ITER,
    model: str = "",
    check: bool = True,
) -> tuple[np.ndarray, bool, int, list[float]]:
    """Newton/IRLS with step halving for a canonical-link GLM.

    Returns ``(coef, converged, n_iter, deviance_trace)``; the trace starts at
    the initial value ``coef = 0``. Convergence requires a relative deviance
    change below ``DEVIANCE_TOL`` and a max absolute score, scaled by the
    number of rows, below ``SCORE_TOL``.
    """
    n, k = D.shape
    if check:
        check_rank(D, model)
    if link.kind == "identity":
        coef = scipy.linalg.lstsq(D, y, check_finite=False, lapack_driver="gelsy")[0]
        # one refinement step removes rounding left in the normal equations
        coef = coef + scipy.linalg.lstsq(D, y - D @ coef, check_finite=False)[0]
        dev0 = link.deviance(y, np.zeros(n))
        return coef, True, 1, [dev0, link.deviance(y, D @ coef)]

    coef = np.zeros(k)
    eta = np.zeros(n)
    dev = link.deviance(y, eta)
    trace = [dev]
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        w = mu * (1.0 - mu)
        score = D.T @ (y - mu)
        info = D.T @ (D * w[:, None])
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos", check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            raise SeparationError("information matrix became singular", model=model) from None
        t = 1.0
        while True:
            new = coef + t * step
            eta_new = D @ new
            dev_new = link.deviance(y, eta_new)
            if dev_new <= dev * (1 + 1e-12) + 1e-12 or t < 1e-10:
                break
            t *= 0.5
        if np.max(np.abs(new)) > SEPARATION_BOUND:
            raise SeparationError(
                f"coefficient magnitude exceeded {SEPARATION_BOUND:g} (perfect separation)",
                model=model,
            )
        rel = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        coef, eta, dev = new, eta_new, min(dev_new, dev)
        trace.append(dev_new)
        if rel < DEVIANCE_TOL:
            resid_score = D.T @ (y - expit(eta))
            if np.max(np.abs(resid_score)) / n <= SCORE_TOL:
                return coef, True, it, trace
    return coef, False, max_iter, trace


def fit_design(d: StudyDataset, design: Design, link: Link) -> GlmFit:
    """Fit ``link`` on ``design``; see :func:`fit_mle`."""
    y = d.y[design.mask]
    D = design.matrix
    coef, converged, n_iter, trace = irls(D, y, link, model=design.name)
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {MAX_ITER} iterations", model=design.name)
    eta = D @ coef
    info = D.T @ (D * link.hdot(eta)[:, None])
    score = D.T @ (y - link.h(eta))
    return GlmFit(
        coef=coef,
        link=link,
        converged=converged,
        n_iter=n_iter,
        deviance=trace[-1],
        deviance_trace=tuple(trace),
        info_matrix=0.5 * (info + info.T),
        score=score,
        stratum_mask=design.mask,
        design=design,
    )


def fit_mle(d: StudyDataset, design: Design, link: Link | str) -> GlmFit:
    """Maximum-likelihood fit of a canonical-link GLM on one stratum.

    Raises:
        RankDeficientError: the stratum design lacks full column rank.
        SeparationError: logit coefficients diverge.
        ConvergenceError: IRLS hit the iteration cap.
    """
    if isinstance(link, str):
        link = Link(link)
    return fit_design(d, design, link)


def fitted_mean(
    fit: GlmFit, x: Sequence[float] | np.ndarray, extra_cols: Sequence[float] | None = None
) -> float:
    """Evaluate ``h((1, x', extra')coef)`` for one covariate vector."""
    row = np.concatenate([[1.0], np.asarray(x, dtype=float).ravel()])
    if extra_cols is not None:
        row = np.concatenate([row, np.asarray(extra_cols, dtype=float).ravel()])
    if fit.design is not None and fit.design.intercept_only:
        row = row[:1]
    elif extra_cols is None and len(row) < len(fit.coef):
        # internal (z=1) subjects carry zero interaction columns
        row = np.concatenate([row, np.zeros(len(fit.coef) - len(row))])
    if len(row) != len(fit.coef):
        raise ValueError(f"expected {len(fit.coef)} design entries, got {len(row)}")
    return float(fit.link.h(row @ fit.coef))
