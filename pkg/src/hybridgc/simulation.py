"""Hybrid-control data generators and the Monte Carlo harness.

Four data-generating scenarios share the covariate law ``X | Z=z ~ N3(nu_z, I)``
with ``nu_1 = 0`` and ``nu_0 = (-0.2, 0.4, 1)``, 1:1 randomization inside the
trial and no treatment effect. Outcomes follow::

    A: Y = (1,X')b + (1-Z)(1,X')g + eps
    B: Y = (1,X')b + (1-Z)(1,X')g_B + 0.5 X1 X2 + 0.25 (X3^2 - 1) + eps
    C: Y = 1{U < expit((1,X')b + (1-Z)(1,X')g)}
    D: Y = 1{U < expit((1,X')b + (1-Z)(1,X')g_D + 0.5 X1 X2 + 0.25 (X3^2 - 1))}

with ``b = 0.5 (1,-1,1,-1)``, ``g = (0 1_{4-m}, 0.75 1_m)``, ``eps ~ N(0, 0.2^2)``.
``g_B`` and ``g_D`` are calibrated so that the limit of the ML interaction
estimates equals ``g``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import EffectMeasure, StudyDataset, as_effect
from .errors import CalibrationError, ConfigError, FitError, HybridGCError, MissingCalibrationError
from .estimators import ALL_METHODS, MethodKind, estimate
from .glm import IDENTITY, LOGIT, Link, irls, main_columns
from .inference import analytic_inference, replicate_rng
from .lasso import select_interactions

log = logging.getLogger(__name__)

SCENARIOS = ("A", "B", "C", "D")
NU1 = (0.0, 0.0, 0.0)
NU0 = (-0.2, 0.4, 1.0)
BETA_MAIN = (0.5, -0.5, 0.5, -0.5)
NOISE_SD = 0.2
NONLINEAR = (0.5, 0.25)
GAMMA_SIZE = 0.75
MAX_FAILURE_RATE = 0.01
ESTIMANDS = ("mu0", "mu1", "delta")


def gamma_target(m: int) -> np.ndarray:
    """``(0 1_{4-m}, 0.75 1_m)``: the last ``m`` interactions are nonzero."""
    if not 0 <= m <= 4:
        raise ConfigError("m must be an integer between 0 and 4")
    return np.concatenate([np.zeros(4 - m), np.full(m, GAMMA_SIZE)])


@dataclass(frozen=True)
class ScenarioSpec:
    """Generator parameters for one scenario and sample-size configuration.

    ``gamma`` is the interaction vector actually used to generate external
    controls; for A and C it equals ``gamma_target``, for B and D it is the
    calibrated value (``None`` until calibrated).
    """

    scenario: str
    m: int
    n1: int = 200
    n0: int = 200
    pi: float = 0.5
    nu1: tuple[float, ...] = NU1
    nu0: tuple[float, ...] = NU0
    beta_main: tuple[float, ...] = BETA_MAIN
    noise_sd: float = NOISE_SD
    nonlinear: tuple[float, float] = (0.0, 0.0)
    gamma: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of A, B, C, D")
        if not (isinstance(self.m, (int, np.integer)) and 0 <= self.m <= 4):
            raise ConfigError("m must be an integer between 0 and 4")
        if self.n1 < 1 or self.n0 < 0:
            raise ConfigError("n1 must be positive and n0 nonnegative")

    @property
    def binary(self) -> bool:
        return self.scenario in ("C", "D")

    @property
    def outcome_kind(self) -> str:
        return "binary" if self.binary else "continuous"

    @property
    def link(self) -> Link:
        return LOGIT if self.binary else IDENTITY

    @property
    def gamma_target(self) -> np.ndarray:
        return gamma_target(self.m)

    @property
    def calibrated(self) -> bool:
        return self.gamma is not None


def make_scenario(
    scenario: str, m: int, n1: int = 200, n0: int = 200, gamma: Sequence[float] | None = None
) -> ScenarioSpec:
    """Scenario spec with its generating interactions filled in where possible.

    A and C use the target interactions; B uses the closed-form calibration;
    D needs ``gamma`` from :func:`calibrate_gamma_D` (left ``None`` otherwise).
    """
    scenario = str(scenario).upper()
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of A, B, C, D")
    nonlinear = NONLINEAR if scenario in ("B", "D") else (0.0, 0.0)
    spec = ScenarioSpec(scenario, m, n1, n0, nonlinear=nonlinear)
    if gamma is None:
        if scenario in ("A", "C"):
            gamma = gamma_target(m)
        elif scenario == "B":
            gamma = calibrate_gamma_B(m)
    if gamma is not None:
        gamma = tuple(float(v) for v in gamma)
        if len(gamma) != 4:
            raise ConfigError("gamma must have 4 components")
    return replace(spec, gamma=gamma)


def nonlinear_term(x: np.ndarray, coefs: tuple[float, float] = NONLINEAR) -> np.ndarray:
    a, b = coefs
    return a * x[:, 0] * x[:, 1] + b * (x[:, 2] ** 2 - 1.0)


def linear_predictor(spec: ScenarioSpec, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    D = main_columns(x)
    eta = D @ np.asarray(spec.beta_main)
    if spec.gamma is not None:
        eta = eta + (1.0 - z) * (D @ np.asarray(spec.gamma))
    if any(spec.nonlinear):
        eta = eta + nonlinear_term(x, spec.nonlinear)
    return eta


def generate(spec: ScenarioSpec, rng: np.random.Generator) -> StudyDataset:
    """Draw one study: ``n1`` trial subjects followed by ``n0`` external controls.

    Draw order is fixed (trial covariates, arms, trial noise, external
    covariates, external noise) so the trial part of a replicate does not
    depend on ``m`` under a shared stream.

    Raises:
        CalibrationError: B/D spec without calibrated interactions.
    """
    if spec.gamma is None:
        raise MissingCalibrationError(f"scenario {spec.scenario} requires calibrated interactions")
    p = len(spec.nu1)
    x1 = rng.standard_normal((spec.n1, p)) + np.asarray(spec.nu1)
    a1 = (rng.random(spec.n1) < spec.pi).astype(np.int8)
    noise1 = rng.random(spec.n1) if spec.binary else rng.standard_normal(spec.n1)
    x0 = rng.standard_normal((spec.n0, p)) + np.asarray(spec.nu0)
    noise0 = rng.random(spec.n0) if spec.binary else rng.standard_normal(spec.n0)

    x = np.vstack([x1, x0])
    z = np.concatenate([np.ones(spec.n1, np.int8), np.zeros(spec.n0, np.int8)])
    a = np.concatenate([a1, np.zeros(spec.n0, np.int8)])
    eta = linear_predictor(spec, x, z)
    noise = np.concatenate([noise1, noise0])
    if spec.binary:
        y = (noise < expit(eta)).astype(float)
    else:
        y = eta + spec.noise_sd * noise
    return StudyDataset(z, a, y, x, spec.outcome_kind)


# ------------------------------------------------------------------ #
# Calibration
# ------------------------------------------------------------------ #


def gaussian_moments(nu: Sequence[float], coefs: tuple[float, float] = NONLINEAR):
    """Closed-form ``E[(1,X')'(1,X')]`` and ``E[f(X)(1,X')']`` for ``X ~ N3(nu, I)``.

    ``f = a X1 X2 + b (X3^2 - 1)``; uses ``E[X3^3] = nu3^3 + 3 nu3``.
    """
    n1, n2, n3 = (float(v) for v in nu)
    a, b = coefs
    v = np.array([1.0, n1, n2, n3])
    second = np.outer(v, v)
    second[1:, 1:] += np.eye(3)
    cross = np.array([
        a * n1 * n2 + b * n3**2,
        a * (1 + n1**2) * n2 + b * n1 * n3**2,
        a * n1 * (1 + n2**2) + b * n2 * n3**2,
        a * n1 * n2 * n3 + b * (n3**3 + 3 * n3 - n3),
    ])
    return second, cross


def gaussian_moments_mc(
    nu: Sequence[float], draws: int, rng: np.random.Generator,
    coefs: tuple[float, float] = NONLINEAR, chunk: int = 1_000_000,
):
    """Monte Carlo estimates of the same two moments (independent oracle)."""
    second = np.zeros((4, 4))
    cross = np.zeros(4)
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        x = rng.standard_normal((k, 3)) + np.asarray(nu)
        D = main_columns(x)
        second += D.T @ D
        cross += D.T @ nonlinear_term(x, coefs)
        done += k
    return second / draws, cross / draws


def calibrate_gamma_B(
    m: int, nu0: Sequence[float] = NU0, coefs: tuple[float, float] = NONLINEAR
) -> np.ndarray:
    """Interactions for scenario B: the target minus the external-source
    least-squares projection of the nonlinear terms onto ``(1, X')``."""
    second, cross = gaussian_moments(nu0, coefs)
    if abs(np.linalg.det(second)) < 1e-12:
        raise CalibrationError("covariate second-moment matrix is singular")
    return gamma_target(m) - np.linalg.solve(second, cross)


def verify_gamma_B(m: int, n: int = 1_000_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Large-sample check of scenario B's defining property.

    Draws ``n`` external controls from scenario B and regresses Y on
    ``(1, X')``; the slope vector minus ``beta_main`` estimates the limiting
    ML interactions, which should equal ``gamma_target(m)``. Returns the
    estimate and its heteroscedasticity-robust standard errors.
    """
    spec = make_scenario("B", m, n1=1, n0=n)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    d = generate(spec, rng)
    ext = d.z == 0
    D = main_columns(d.x[ext])
    y = d.y[ext]
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    resid = y - D @ coef
    bread = np.linalg.inv(D.T @ D)
    meat = (D * resid[:, None] ** 2).T @ D
    se = np.sqrt(np.diag(bread @ meat @ bread))
    return coef - np.asarray(spec.beta_main), se


@dataclass(frozen=True)
class CalibrationResult:
    scenario: str
    m: int
    gamma: tuple[float, ...]
    gamma_star_hat: tuple[float, ...]
    iterations: int
    converged: bool
    n_cal: int
    seed: int | None
    tol: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationResult":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        raw["gamma"] = tuple(raw["gamma"])
        raw["gamma_star_hat"] = tuple(raw["gamma_star_hat"])
        return cls(**raw)


def calibrate_gamma_D(
    m: int,
    n_cal: int = 1_000_000,
    seed: int = 0,
    tol: float = 0.005,
    max_iter: int = 20,
    coefs: tuple[float, float] = NONLINEAR,
    nu0: Sequence[float] = NU0,
    min_n: int = 1_000_000,
) -> CalibrationResult:
    """Fixed-point search for scenario D's generating interactions.

    One large control sample (``n_cal`` internal and ``n_cal`` external
    subjects) is drawn once and reused at every iteration, so the update
    ``g_D <- g_D + (g_target - g_star_hat)`` acts on a fixed sample. Stops when
    ``max |g_star_hat - g_target| < tol``.

    Raises:
        CalibrationError: no convergence within ``max_iter`` iterations.
    """
    if n_cal < min_n:
        raise ValueError(f"n_cal must be at least {min_n}")
    target = gamma_target(m)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    x_int = rng.standard_normal((n_cal, 3))
    u_int = rng.random(n_cal)
    x_ext = rng.standard_normal((n_cal, 3)) + np.asarray(nu0)
    u_ext = rng.random(n_cal)
    D_int = main_columns(x_int)
    D_ext = main_columns(x_ext)
    beta = np.asarray(BETA_MAIN)
    f_int = nonlinear_term(x_int, coefs)
    f_ext = nonlinear_term(x_ext, coefs)

    y_int = (u_int < expit(D_int @ beta + f_int)).astype(float)
    b_int, ok, _, _ = irls(D_int, y_int, LOGIT, model="calibration internal")
    if not ok:
        raise CalibrationError("internal calibration fit did not converge")
    gamma = target.copy()
    gamma_star = np.full(4, np.nan)
    for it in range(1, max_iter + 1):
        y_ext = (u_ext < expit(D_ext @ (beta + gamma) + f_ext)).astype(float)
        b_ext, ok, _, _ = irls(D_ext, y_ext, LOGIT, model="calibration external")
        if not ok:
            raise CalibrationError("external calibration fit did not converge")
        gamma_star = b_ext - b_int
        err = float(np.max(np.abs(gamma_star - target)))
        log.info("calibration D m=%d iteration %d: max error %.5f", m, it, err)
        if err < tol:
            return CalibrationResult("D", m, tuple(gamma.tolist()), tuple(gamma_star.tolist()),
                                     it, True, n_cal, seed, tol)
        gamma = gamma + (target - gamma_star)
    raise CalibrationError(f"scenario D calibration did not reach tol {tol} in {max_iter} iterations")


# ------------------------------------------------------------------ #
# Truth
# ------------------------------------------------------------------ #


def _gh_expectation(fn, nu: Sequence[float], nodes: int = 60) -> float:
    """``E[fn(X)]`` for ``X ~ N3(nu, I)`` by tensor Gauss-Hermite quadrature."""
    t, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    g = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3) + np.asarray(nu)
    ww = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    return float(ww @ fn(g))


def true_mu0(spec: ScenarioSpec) -> float:
    """Control mean in the trial population.

    Continuous scenarios are linear in the mean with mean-zero nonlinear
    terms under ``nu1 = 0``, giving ``(1, nu1')b``; binary ones integrate
    ``expit`` of the internal linear predictor by quadrature.
    """
    beta = np.asarray(spec.beta_main)
    if not spec.binary:
        n1, n2, n3 = spec.nu1
        a, b = spec.nonlinear
        return float(beta @ np.concatenate([[1.0], spec.nu1]) + a * n1 * n2 + b * n3**2)

    def fn(x):
        eta = main_columns(x) @ beta
        if any(spec.nonlinear):
            eta = eta + nonlinear_term(x, spec.nonlinear)
        return expit(eta)

    return _gh_expectation(fn, spec.nu1)


def mc_mu0(spec: ScenarioSpec, draws: int, seed: int, chunk: int = 2_000_000) -> tuple[float, float]:
    """Monte Carlo oracle for the trial control mean: ``(estimate, MC standard error)``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        x = rng.standard_normal((k, 3)) + np.asarray(spec.nu1)
        z = np.ones(k)
        eta = linear_predictor(replace(spec, gamma=None), x, z)
        if spec.binary:
            vals = expit(eta)
        else:
            vals = eta
        total += float(vals.sum())
        total_sq += float((vals**2).sum())
        done += k
    mean = total / draws
    var = max(total_sq / draws - mean**2, 0.0)
    return mean, math.sqrt(var / draws)


# ------------------------------------------------------------------ #
# Monte Carlo engine
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    m: int
    n1: int
    n0: int
    method: str
    estimand: str
    bias: float
    sd: float
    cp: float
    reps: int


@dataclass(frozen=True)
class MCSummary:
    rows: tuple[SummaryRow, ...]
    truth: dict
    requested: int
    failures: dict
    failure_reasons: dict = field(default_factory=dict)

    def get(self, method: MethodKind | str, estimand: str) -> SummaryRow:
        label = MethodKind.parse(method).value
        for r in self.rows:
            if r.method == label and r.estimand == estimand:
                return r
        raise KeyError((label, estimand))

    @property
    def failure_rate(self) -> float:
        if not self.failures:
            return 0.0
        return max(self.failures.values()) / self.requested

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([
                r.scenario, str(r.m), str(r.n1), str(r.n0), r.method, r.estimand,
                _fmt(r.bias), _fmt(r.sd), _fmt(r.cp), str(r.reps),
            ]))
        return "\n".join(lines) + "\n"


CSV_COLUMNS = ("scenario", "m", "n1", "n0", "method", "estimand", "bias", "sd", "cp", "reps")


def _fmt(v: float) -> str:
    if v is None or not math.isfinite(v):
        return "NA"
    out = f"{v:.4f}"
    return "0.0000" if out == "-0.0000" else out


def run_replicate(
    spec: ScenarioSpec,
    methods: Sequence[MethodKind],
    effect: EffectMeasure,
    master_seed: int,
    index: int,
    alpha: float = 0.05,
) -> dict:
    """Generate one dataset and analyse it with every method.

    Returns ``{method: (mu0, mu1, delta, lo0, hi0, lo1, hi1, lod, hid) or
    error message}``. The adaptive-lasso fit is shared by all methods that
    need it.
    """
    rng = replicate_rng(master_seed, index)
    d = generate(spec, rng)
    out: dict = {}
    pen = None
    pen_error = None
    if MethodKind.GC_VS in methods:
        try:
            pen = select_interactions(d, spec.link, rng=rng)
        except (HybridGCError, np.linalg.LinAlgError) as exc:
            pen_error = f"{type(exc).__name__}: {exc}"
    for method in methods:
        if method is MethodKind.GC_VS and pen is None:
            out[method.value] = pen_error
            continue
        try:
            est = estimate(d, method, effect, spec.link, pen=pen)
            rep = analytic_inference(d, est, alpha)
        except (HybridGCError, np.linalg.LinAlgError) as exc:
            out[method.value] = f"{type(exc).__name__}: {exc}"
            continue
        out[method.value] = (
            est.mu0, est.mu1, est.delta, *rep.ci_mu0, *rep.ci_mu1, *rep.ci_delta,
        )
    return out


def _run_chunk(args):
    spec, methods, effect, seed, indices, alpha = args
    return [(i, run_replicate(spec, methods, effect, seed, i, alpha)) for i in indices]


def default_threads() -> int:
    env = os.environ.get("HYBRIDGC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_mc(
    spec: ScenarioSpec,
    methods: Sequence[MethodKind | str] = ALL_METHODS,
    effect: EffectMeasure | str = "difference",
    reps: int = 2000,
    master_seed: int = 0,
    threads: int | None = None,
    alpha: float = 0.05,
    max_failure_rate: float | None = MAX_FAILURE_RATE,
    progress=None,
) -> MCSummary:
    """Replicate the full analysis ``reps`` times and aggregate bias/SD/CP.

    Replicate ``i`` uses its own stream derived from ``(master_seed, i)``, so
    results do not depend on ``threads``. Failed fits are excluded per method
    and counted.

    Raises:
        CalibrationError: B/D spec without calibrated interactions.
        FitError: some method failed in more than ``max_failure_rate`` of
            replicates (the summary is attached as ``exc.summary``).
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if not spec.calibrated:
        raise MissingCalibrationError(f"scenario {spec.scenario} has not been calibrated")
    methods = [MethodKind.parse(m) for m in methods]
    effect = as_effect(effect)
    threads = threads or default_threads()
    truth0 = true_mu0(spec)
    truth = {"mu0": truth0, "mu1": truth0, "delta": effect.delta(truth0, truth0)}

    results: dict[int, dict] = {}
    if threads <= 1:
        for i in range(reps):
            results[i] = run_replicate(spec, methods, effect, master_seed, i, alpha)
            if progress is not None:
                progress(i + 1, reps)
    else:
        chunks = [list(range(i, min(i + 25, reps))) for i in range(0, reps, 25)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            done = 0
            for chunk in pool.map(_run_chunk, [(spec, methods, effect, master_seed, c, alpha)
                                               for c in chunks]):
                for i, res in chunk:
                    results[i] = res
                done += len(chunk)
                if progress is not None:
                    progress(done, reps)

    rows = []
    failures = {}
    reasons: dict = {}
    for method in methods:
        vals = []
        for i in range(reps):
            r = results[i][method.value]
            if isinstance(r, tuple):
                vals.append(r)
            else:
                reasons.setdefault(method.value, []).append((i, r))
        failures[method.value] = reps - len(vals)
        for i, reason in reasons.get(method.value, []):
            log.warning("replicate %d, %s failed: %s", i, method.value, reason)
        arr = np.array(vals, dtype=float).reshape(-1, 9)
        for k, estimand in enumerate(ESTIMANDS):
            est = arr[:, k]
            lo, hi = arr[:, 3 + 2 * k], arr[:, 4 + 2 * k]
            t = truth[estimand]
            n_ok = len(est)
            bias = float(est.mean() - t) if n_ok else float("nan")
            sd = float(est.std(ddof=1)) if n_ok >= 2 else float("nan")
            cp = float(np.mean((lo <= t) & (t <= hi))) if n_ok else float("nan")
            rows.append(SummaryRow(spec.scenario, spec.m, spec.n1, spec.n0, method.value,
                                   estimand, bias, sd, cp, n_ok))
    summary = MCSummary(tuple(rows), truth, reps, failures, reasons)
    if max_failure_rate is not None and summary.failure_rate > max_failure_rate:
        exc = FitError(
            f"failure rate {summary.failure_rate:.3f} exceeds {max_failure_rate:.3f}",
            model="simulation",
        )
        exc.summary = summary
        raise exc
    return summary


def read_summary_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
