"""Property-based checks over fuzzed inputs."""

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hybridgc._cd import soft_threshold
from hybridgc.data import EffectMeasure, StudyDataset, load_csv, save_csv
from hybridgc.errors import DataValidationError
from hybridgc.glm import IDENTITY, LOGIT
from hybridgc.inference import wald_ci
from hybridgc.lasso import (
    _full_problem,
    _objective,
    adaptive_weights,
    fit_penalized,
    lambda_max,
    ml_interactions,
)

SETTINGS = settings(max_examples=60, deadline=None,
                    suppress_health_check=[HealthCheck.function_scoped_fixture])

cell = st.one_of(
    st.sampled_from(["0", "1", "2", "-1", "0.5", "", "abc", "nan", "inf", "1e3"]),
    st.floats(-5, 5, allow_nan=False).map(repr),
)


def _is_num(s):
    try:
        return math.isfinite(float(s))
    except ValueError:
        return False


def reference_valid(rows, binary):
    """Independent statement of the data-model rules for a parsed table."""
    if not rows:
        return False
    for z, a, y, x in rows:
        if not all(_is_num(c) for c in (z, a, y, x)):
            return False
        if float(z) not in (0, 1) or float(a) not in (0, 1):
            return False
        if float(z) == 0 and float(a) == 1:
            return False
        if binary and float(y) not in (0, 1):
            return False
    return any(float(z) == 1 and float(a) == 0 for z, a, _, _ in rows)


@SETTINGS
@given(rows=st.lists(st.tuples(cell, cell, cell, cell), max_size=8), binary=st.booleans())
def test_fuzzed_csv(tmp_path, rows, binary):
    path = tmp_path / "f.csv"
    path.write_text("z,a,y,x1\n" + "".join(",".join(r) + "\n" for r in rows))
    kind = "binary" if binary else "continuous"
    if reference_valid(rows, binary):
        d = load_csv(path, kind)
        assert d.n == len(rows)
        for row in d.rows:
            assert row.z in (0, 1) and row.a in (0, 1) and not (row.z == 0 and row.a == 1)
    else:
        with pytest.raises(DataValidationError):
            load_csv(path, kind)


@SETTINGS
@given(
    n=st.integers(2, 30),
    p=st.integers(0, 3),
    seed=st.integers(0, 2**32 - 1),
    scale=st.sampled_from([1e-300, 1e-8, 1.0, 1e12]),
)
def test_round_trip(tmp_path, n, p, seed, scale):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, n)
    z[0] = 1
    a = np.where(z == 1, rng.integers(0, 2, n), 0)
    a[0] = 0
    d = StudyDataset(z, a, rng.standard_normal(n) * scale, rng.standard_normal((n, p)) * scale)
    path = tmp_path / "rt.csv"
    save_csv(d, path)
    assert load_csv(path).equals(d)


@settings(deadline=None)
@given(x=st.floats(-1e6, 1e6), t=st.floats(0, 1e6))
def test_soft_threshold(x, t):
    s = soft_threshold(x, t)
    assert abs(s) <= abs(x)
    assert s == 0.0 or math.copysign(1, s) == math.copysign(1, x)
    assert s == pytest.approx(math.copysign(max(abs(x) - t, 0.0), x), abs=1e-9)


@settings(deadline=None)
@given(est=st.floats(-1e3, 1e3), se=st.floats(0, 1e3), alpha=st.floats(0.001, 0.5))
def test_wald_symmetric(est, se, alpha):
    lo, hi = wald_ci(est, se, alpha)
    assert lo <= est <= hi
    assert (est - lo) == pytest.approx(hi - est, rel=1e-9, abs=1e-9)


@settings(deadline=None)
@given(mu0=st.floats(0.01, 0.99), mu1=st.floats(0.01, 0.99),
       kind=st.sampled_from(["difference", "log_ratio", "log_odds_ratio"]))
def test_effect_antisymmetric(mu0, mu1, kind):
    e = EffectMeasure(kind)
    assert e.delta(mu0, mu1) == pytest.approx(-e.delta(mu1, mu0))
    assert e.delta(mu0, mu0) == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), binary=st.booleans(), frac=st.floats(0.0, 1.2))
def test_penalized_solution_is_optimal(seed, binary, frac):
    """No random perturbation of the solution lowers the objective."""
    rng = np.random.default_rng(seed)
    n1 = n0 = 60
    x = rng.standard_normal((n1 + n0, 2))
    z = np.r_[np.ones(n1, int), np.zeros(n0, int)]
    a = np.r_[rng.integers(0, 2, n1), np.zeros(n0, int)]
    a[:2] = (0, 1)
    eta = 0.2 + x @ np.array([0.4, -0.3]) + (1 - z) * rng.normal(0, 0.5)
    link = LOGIT if binary else IDENTITY
    if binary:
        y = (rng.random(len(eta)) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = eta + 0.5 * rng.standard_normal(len(eta))
    d = StudyDataset(z, a, y, x, "binary" if binary else "continuous")
    weights = adaptive_weights(ml_interactions(d, link)[2])
    lam = frac * lambda_max(d, link, weights)
    fit = fit_penalized(d, link, weights, lam)
    D, yc, n_main = _full_problem(d)
    pen = weights.full(n_main)
    base = _objective(D, yc, link, fit.coef, pen, lam)
    assert base == pytest.approx(fit.objective, rel=1e-12)
    for _ in range(20):
        step = rng.standard_normal(len(fit.coef)) * 10.0 ** rng.uniform(-5, -1)
        assert _objective(D, yc, link, fit.coef + step, pen, lam) >= base - 1e-12
