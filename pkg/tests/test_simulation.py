import dataclasses

import numpy as np
import pytest

from hybridgc.errors import CalibrationError, ConfigError, FitError
from hybridgc.estimators import MethodKind, estimate
from hybridgc.glm import IDENTITY, LOGIT, irls, main_columns
from hybridgc.inference import analytic_inference, replicate_rng
from hybridgc.simulation import (
    CSV_COLUMNS,
    NU0,
    CalibrationResult,
    calibrate_gamma_B,
    calibrate_gamma_D,
    gamma_target,
    gaussian_moments,
    gaussian_moments_mc,
    generate,
    make_scenario,
    mc_mu0,
    run_mc,
    true_mu0,
    verify_gamma_B,
)

BETA = np.array([0.5, -0.5, 0.5, -0.5])


def ols_with_se(D, y):
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    resid = y - D @ coef
    sigma2 = resid @ resid / (len(y) - D.shape[1])
    return coef, np.sqrt(np.diag(np.linalg.inv(D.T @ D)) * sigma2)


class TestGenerate:
    def test_shapes_and_strata(self):
        d = generate(make_scenario("A", 0, 200, 150), replicate_rng(0, 0))
        assert d.n1 == 200 and d.n0 == 150 and d.p == 3
        assert d.n_trt + d.n_ic == 200
        assert np.all(d.a[d.z == 0] == 0)

    def test_binary_outcomes(self):
        d = generate(make_scenario("C", 2), replicate_rng(0, 0))
        assert d.outcome_kind == "binary" and set(np.unique(d.y)) <= {0.0, 1.0}

    def test_trial_part_independent_of_m(self):
        rows = []
        for m in range(5):
            d = generate(make_scenario("A", m), replicate_rng(3, 0))
            rows.append(d.subset(np.flatnonzero(d.z == 1)))
        assert all(r.equals(rows[0]) for r in rows[1:])

    def test_covariate_means(self):
        d = generate(make_scenario("A", 0, 20_000, 20_000), replicate_rng(1, 0))
        np.testing.assert_allclose(d.x[d.z == 1].mean(axis=0), 0.0, atol=0.04)
        np.testing.assert_allclose(d.x[d.z == 0].mean(axis=0), NU0, atol=0.04)
        assert abs(d.a[d.z == 1].mean() - 0.5) < 0.02

    def test_linear_recovery_large_n(self):
        d = generate(make_scenario("A", 0, 1, 1_000_000), replicate_rng(2, 0))
        ext = d.z == 0
        coef, se = ols_with_se(main_columns(d.x[ext]), d.y[ext])
        assert np.all(np.abs(coef - BETA) < 4 * se)

    def test_logistic_recovery_large_n(self):
        d = generate(make_scenario("C", 0, 1, 1_000_000), replicate_rng(2, 0))
        ext = d.z == 0
        D = main_columns(d.x[ext])
        coef, ok, _, _ = irls(D, d.y[ext], LOGIT)
        p = 1 / (1 + np.exp(-(D @ coef)))
        se = np.sqrt(np.diag(np.linalg.inv(D.T @ (D * (p * (1 - p))[:, None]))))
        assert ok and np.all(np.abs(coef - BETA) < 4 * se)

    def test_no_treatment_effect_large_n(self):
        d = generate(make_scenario("A", 3, 1_000_000, 0), replicate_rng(4, 0))
        est = estimate(d, "UA-RCT")
        rep = analytic_inference(d, est)
        assert abs(est.delta) < 4 * rep.se_delta

    def test_uncalibrated_d_rejected(self):
        spec = make_scenario("D", 1)
        assert spec.gamma is None
        with pytest.raises(CalibrationError):
            generate(spec, replicate_rng(0, 0))

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            make_scenario("E", 0)
        with pytest.raises(ConfigError):
            make_scenario("A", 5)


class TestCalibrationB:
    def test_closed_form_value(self):
        # projection of the nonlinear terms under N3(nu0, I) onto (1, X')
        expected = gamma_target(2) - np.array([-0.21, 0.2, -0.1, 0.5])
        np.testing.assert_allclose(calibrate_gamma_B(2), expected, atol=1e-12)

    def test_moments_match_monte_carlo(self):
        second, cross = gaussian_moments(NU0)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(17)))
        s_mc, c_mc = gaussian_moments_mc(NU0, 10_000_000, rng)
        assert np.max(np.abs(second - s_mc)) < 5e-3
        assert np.max(np.abs(cross - c_mc)) < 5e-3
        corr = np.linalg.solve(second, cross)
        corr_mc = np.linalg.solve(s_mc, c_mc)
        np.testing.assert_allclose(np.round(corr, 3), np.round(corr_mc, 3), atol=1e-3 + 1e-12)

    def test_shift_independent_of_m(self):
        shifts = [calibrate_gamma_B(m) - gamma_target(m) for m in range(5)]
        # identical up to the rounding of subtracting gamma_target back out
        for s in shifts[1:]:
            np.testing.assert_allclose(s, shifts[0], rtol=0, atol=1e-15)

    def test_zero_nonlinearity(self):
        for m in range(5):
            np.testing.assert_array_equal(calibrate_gamma_B(m, coefs=(0.0, 0.0)), gamma_target(m))

    def test_large_n_recovery(self):
        star, se = verify_gamma_B(2, n=2_000_000, seed=5)
        assert np.all(np.abs(star - gamma_target(2)) < 4 * se)


class TestCalibrationD:
    def test_m0_certificate(self):
        res = calibrate_gamma_D(0, seed=3)
        assert res.converged
        assert np.max(np.abs(res.gamma_star_hat)) < 0.005
        assert np.max(np.abs(res.gamma)) > 0.01  # nonlinear terms need cancelling

    def test_no_nonlinearity_one_step(self):
        res = calibrate_gamma_D(2, seed=3, coefs=(0.0, 0.0), tol=0.01)
        assert res.iterations == 1
        np.testing.assert_array_equal(res.gamma, gamma_target(2))

    def test_deterministic(self, tmp_path):
        a = calibrate_gamma_D(2, seed=1)
        b = calibrate_gamma_D(2, seed=1)
        assert a.gamma == b.gamma
        a.save(tmp_path / "a.json")
        b.save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert CalibrationResult.load(tmp_path / "a.json") == a

    def test_small_sample_rejected(self):
        with pytest.raises(ValueError):
            calibrate_gamma_D(1, n_cal=1000)

    def test_iteration_cap(self):
        with pytest.raises(CalibrationError):
            calibrate_gamma_D(2, seed=0, tol=1e-9, max_iter=2)


class TestTruth:
    def test_continuous(self):
        assert true_mu0(make_scenario("A", 2)) == pytest.approx(0.5, abs=1e-15)
        assert true_mu0(make_scenario("B", 2)) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("scenario", ["C", "D"])
    def test_binary_quadrature_vs_mc(self, scenario):
        spec = make_scenario(scenario, 1, gamma=np.zeros(4))
        q = true_mu0(spec)
        mc, se = mc_mu0(spec, 10_000_000, seed=11)
        assert abs(q - mc) < 4 * se
        assert true_mu0(dataclasses.replace(spec, m=3)) == q

    def test_quadrature_vs_large_mc(self):
        spec = make_scenario("C", 0)
        mc, se = mc_mu0(spec, 100_000_000, seed=12)
        assert se < 2e-5
        assert abs(true_mu0(spec) - mc) < 1e-4


class TestRunMC:
    def test_deterministic_and_thread_invariant(self):
        spec = make_scenario("A", 1, 100, 100)
        a = run_mc(spec, reps=12, master_seed=3, threads=1)
        b = run_mc(spec, reps=12, master_seed=3, threads=1)
        c = run_mc(spec, reps=12, master_seed=3, threads=2)
        assert a.to_csv() == b.to_csv() == c.to_csv()
        assert a == b

    def test_single_rep(self):
        s = run_mc(make_scenario("A", 0, 100, 100), reps=1, master_seed=0, threads=1)
        assert all(np.isnan(r.sd) for r in s.rows)
        assert all(r.cp in (0.0, 1.0) for r in s.rows)
        assert ",NA," in s.to_csv()

    def test_ua_rct_invariant_across_m(self):
        out = []
        for m in (0, 2, 4):
            s = run_mc(make_scenario("A", m, 100, 100), methods=["UA-RCT"], reps=30,
                       master_seed=8, threads=1)
            out.append([(r.bias, r.sd, r.cp) for r in s.rows])
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)
        np.testing.assert_allclose(out[0], out[2], atol=1e-12)

    def test_csv_layout(self):
        s = run_mc(make_scenario("C", 2, 150, 150), methods=["GC-RCT", "GC-VS"], reps=3,
                   master_seed=1, threads=1)
        lines = s.to_csv().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 1 + 2 * 3
        assert lines[1].startswith("C,2,150,150,GC-RCT,mu0,")
        assert s.truth["delta"] == 0.0
        assert s.get(MethodKind.GC_VS, "mu0").reps == 3

    def test_missing_calibration(self):
        with pytest.raises(CalibrationError):
            run_mc(make_scenario("D", 2), reps=1)

    def test_failure_threshold(self):
        spec = make_scenario("C", 4, 12, 12)
        with pytest.raises(FitError) as info:
            run_mc(spec, methods=["GC-RCT"], reps=20, master_seed=0, threads=1)
        summary = info.value.summary
        assert summary.failures["GC-RCT"] > 0
        row = summary.get("GC-RCT", "mu0")
        assert row.reps == 20 - summary.failures["GC-RCT"]
        relaxed = run_mc(spec, methods=["GC-RCT"], reps=20, master_seed=0, threads=1,
                         max_failure_rate=None)
        assert relaxed.failure_rate == summary.failure_rate

    def test_reps_validated(self):
        with pytest.raises(ConfigError):
            run_mc(make_scenario("A", 0), reps=0)


def test_identity_link_for_continuous():
    assert make_scenario("B", 1).link is IDENTITY
    assert make_scenario("D", 1, gamma=np.zeros(4)).link is LOGIT
