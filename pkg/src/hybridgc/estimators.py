"""Point estimators of the arm means and the treatment effect.

All g-computation estimators average fitted control (or treated) means over
every randomized subject, treated and control alike::

    mu_a = (1/n1) * sum_{i: z_i = 1} h((1, x_i')coef)

The five methods differ only in where ``coef`` comes from.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import EffectMeasure, StudyDataset, as_effect
from .errors import ConfigError
from .glm import (
    IDENTITY,
    GlmFit,
    Link,
    design_internal_control,
    design_internal_treated,
    design_pooled_control_ni,
    fit_mle,
    link_for,
    main_columns,
    make_design,
)
from .lasso import PenalizedFit, select_interactions


class MethodKind(str, enum.Enum):
    UA_RCT = "UA-RCT"
    UA_POOLED = "UA-pooled"
    GC_RCT = "GC-RCT"
    GC_NI = "GC-NI"
    GC_VS = "GC-VS"

    @classmethod
    def parse(cls, value: "MethodKind | str") -> "MethodKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("-", "_")
        for m in cls:
            if m.name == key or m.value.upper() == str(value).strip().upper():
                return m
        raise ConfigError(f"unknown method {value!r}")

    @property
    def is_gc(self) -> bool:
        return self.name.startswith("GC")


ALL_METHODS = tuple(MethodKind)


@dataclass(frozen=True, eq=False)
class ArmModel:
    """The fitted working model behind one arm mean.

    Attributes:
        coef: coefficients of ``(1, X')`` (or the intercept alone) used in the
            g-computation average.
        variant: stratum/design family used for influence functions: ``"rct"``
            (internal controls), ``"ni"`` (all controls, no interactions),
            ``"vs"`` (all controls, interactions in ``active_set``) or
            ``"treated"`` (internal treated).
        theta: full coefficient vector of the estimating equation, including
            any interaction block.
    """

    coef: np.ndarray
    link: Link
    variant: str
    intercept_only: bool
    fit: GlmFit | PenalizedFit
    theta: np.ndarray
    active_set: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class PointEstimates:
    mu0: float
    mu1: float
    delta: float
    method: MethodKind
    effect: EffectMeasure
    control: ArmModel
    treated: ArmModel


def gc_average(d: StudyDataset, coef: np.ndarray, link: Link, intercept_only: bool = False) -> float:
    """Mean of ``h((1, x')coef)`` over randomized (z = 1) subjects."""
    if intercept_only:
        return float(link.h(coef[0]))
    X1 = main_columns(d.x[d.z == 1])
    return float(np.mean(link.h(X1 @ coef)))


def _glm_arm(d, design, link, variant) -> ArmModel:
    fit = fit_mle(d, design, link)
    return ArmModel(fit.coef, link, variant, design.intercept_only, fit, fit.coef)


def _mean_arm(d: StudyDataset, stratum: str, variant: str) -> ArmModel:
    design = make_design(d, stratum, intercept_only=True, name=f"{stratum}_mean")
    return _glm_arm(d, design, IDENTITY, variant)


def _check_link(d: StudyDataset, link: Link) -> None:
    if link.kind != link_for(d.outcome_kind).kind:
        raise ConfigError(
            f"{link.kind} link is not appropriate for a {d.outcome_kind} outcome"
        )


# ------------------------------------------------------------------ #
# Individual arm estimators
# ------------------------------------------------------------------ #


def gc_mu1(d: StudyDataset, link: Link) -> tuple[float, GlmFit]:
    """Treated-arm mean from the internal treated fit, averaged over all z = 1 rows."""
    arm = _glm_arm(d, design_internal_treated(d), link, "treated")
    return gc_average(d, arm.coef, link), arm.fit


def gc_mu0_rct(d: StudyDataset, link: Link) -> tuple[float, GlmFit]:
    arm = _glm_arm(d, design_internal_control(d), link, "rct")
    return gc_average(d, arm.coef, link), arm.fit


def gc_mu0_ni(d: StudyDataset, link: Link) -> tuple[float, GlmFit]:
    arm = _glm_arm(d, design_pooled_control_ni(d), link, "ni")
    return gc_average(d, arm.coef, link), arm.fit


def gc_mu0_vs(d: StudyDataset, link: Link, pen: PenalizedFit) -> tuple[float, PenalizedFit]:
    return gc_average(d, pen.beta_vs, link), pen


def _vs_arm(pen: PenalizedFit) -> ArmModel:
    J = pen.active_set
    theta = np.concatenate([pen.beta_vs, pen.gamma_vs[list(J)]])
    return ArmModel(pen.beta_vs, pen.link, "vs", False, pen, theta, J)


def _control_arm(d, method, link, pen, rng) -> ArmModel:
    if method is MethodKind.UA_RCT:
        return _mean_arm(d, "internal_control", "rct")
    if method is MethodKind.UA_POOLED:
        return _mean_arm(d, "all_control", "ni")
    if method is MethodKind.GC_RCT:
        return _glm_arm(d, design_internal_control(d), link, "rct")
    if method is MethodKind.GC_NI:
        return _glm_arm(d, design_pooled_control_ni(d), link, "ni")
    if pen is None:
        pen = select_interactions(d, link, rng=rng)
    return _vs_arm(pen)


def _treated_arm(d, method, link) -> ArmModel:
    if method.is_gc:
        return _glm_arm(d, design_internal_treated(d), link, "treated")
    return _mean_arm(d, "internal_treated", "treated")


def estimate(
    d: StudyDataset,
    method: MethodKind | str,
    effect: EffectMeasure | str = "difference",
    link: Link | None = None,
    pen: PenalizedFit | None = None,
    rng: np.random.Generator | None = None,
) -> PointEstimates:
    """Estimate ``(mu0, mu1, delta)`` with one method.

    For GC-VS a precomputed penalized fit may be passed as ``pen``; otherwise
    the adaptive lasso is run with cross-validation folds drawn from ``rng``.

    Raises:
        ConfigError: link or effect incompatible with the outcome kind.
        FitError: a working model could not be fit (no fallback is attempted).
        DomainError: an arm mean lies outside the domain of ``g``.
    """
    method = MethodKind.parse(method)
    effect = as_effect(effect)
    if effect.kind == "log_odds_ratio" and d.outcome_kind != "binary":
        raise ConfigError("log odds ratio requires a binary outcome")
    link = link or link_for(d.outcome_kind)
    if method.is_gc:
        _check_link(d, link)
    control = _control_arm(d, method, link, pen, rng)
    treated = _treated_arm(d, method, link)
    mu0 = gc_average(d, control.coef, control.link, control.intercept_only)
    mu1 = gc_average(d, treated.coef, treated.link, treated.intercept_only)
    delta = effect.delta(mu0, mu1)
    return PointEstimates(mu0, mu1, delta, method, effect, control, treated)


def ua_rct(d: StudyDataset, effect: EffectMeasure | str = "difference") -> PointEstimates:
    return estimate(d, MethodKind.UA_RCT, effect)


def ua_pooled(d: StudyDataset, effect: EffectMeasure | str = "difference") -> PointEstimates:
    return estimate(d, MethodKind.UA_POOLED, effect)
