import math

import numpy as np
import pytest

from beadcorr import correct, oracle, series
from beadcorr.dists import (ExpGamma, ExpLognormal, ExpNormal, ExpParams,
                            GammaLognormal, GammaNormal, GammaParams, GBGB,
                            GBNormal, GBParams, LognormalParams, NormalParams,
                            gb_from_gamma)
from beadcorr.errors import NumericUnderflowError

Q = oracle.QuadConfig()
CFG = series.SeriesConfig()
UNIFORM = GBParams(1, 0, 1, 1, 1)


class TestRma:
    def test_symmetric_point_is_half(self):
        # choose mu so the conditional location sits at p/2
        p, theta, sigma = 10.0, 0.05, 1.2
        mu = p / 2.0 - sigma ** 2 * theta
        got = correct.correct_rma(p, ExpParams(theta), NormalParams(mu, sigma))
        assert got == pytest.approx(p / 2.0, abs=1e-12)

    def test_against_oracle(self):
        e, b = ExpParams(0.01), NormalParams(10.0, 2.0)
        got = correct.correct_rma(100.0, e, b)
        ref = oracle.posterior_mean_quadrature(100.0, ExpNormal(e, b), Q)
        assert got == pytest.approx(ref, rel=1e-6)

    def test_range_property(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            mu = float(rng.uniform(20, 150))
            sigma = mu * float(rng.uniform(0.05, 0.25))
            theta = 1.0 / float(rng.uniform(20, 300))
            e, b = ExpParams(theta), NormalParams(mu, sigma)
            p = float(rng.uniform(mu * 0.5, mu + 8 / theta))
            val = correct.correct_rma(p, e, b)
            assert 0.0 < val < p

    def test_underflow_raises(self):
        with pytest.raises(NumericUnderflowError):
            correct.correct_rma(1.0, ExpParams(0.001), NormalParams(500.0, 4.0))

    def test_monotone_in_p(self):
        e, b = ExpParams(0.01), NormalParams(100.0, 15.0)
        grid = np.linspace(40.0, 400.0, 200)
        vals = [correct.correct_rma(float(p), e, b) for p in grid]
        assert np.all(np.diff(vals) >= -1e-9)


class TestMbcb:
    def test_mu_sp_zero(self):
        sigma = 3.0
        e = ExpParams(0.1)
        b = NormalParams(5.0 - sigma ** 2 * 0.1, sigma)
        p = b.mu + sigma ** 2 * e.theta  # conditional location exactly zero
        got = correct.correct_mbcb(p, e, b)
        assert got == pytest.approx(0.79788456 * sigma, abs=1e-8)

    def test_tail_asymptote(self):
        # five sigmas in: within 1e-4 sigma of the location itself
        sigma = 2.0
        e, b = ExpParams(0.01), NormalParams(10.0, sigma)
        p = b.mu + sigma ** 2 * e.theta + 5 * sigma
        mu_sp = p - b.mu - sigma ** 2 * e.theta
        assert correct.correct_mbcb(p, e, b) == pytest.approx(mu_sp, abs=1e-4 * sigma)

    def test_converges_to_rma_for_large_p(self):
        # the gap at large p is sigma*phi(mu/sigma + sigma*theta); vanishing
        # requires the noise bulk well above zero (mu/sigma >= ~6)
        e, b = ExpParams(0.01), NormalParams(15.0, 2.0)
        p = b.mu + b.sigma ** 2 * e.theta + 12 * b.sigma
        gap = abs(correct.correct_rma(p, e, b) - correct.correct_mbcb(p, e, b))
        assert gap < 1e-8 * b.sigma


class TestExpGamma:
    def test_exact_polynomial_cases(self):
        # rate cancellation leaves pure power integrals
        for p in (7.0, 33.0):
            beta = 4.0
            got1 = correct.correct_exp_gamma(p, ExpParams(1.0 / beta),
                                             GammaParams(1.0, beta))
            assert got1 == pytest.approx(p / 2.0, rel=1e-13)
            got2 = correct.correct_exp_gamma(p, ExpParams(1.0 / beta),
                                             GammaParams(2.0, beta))
            assert got2 == pytest.approx(p / 3.0, rel=1e-13)

    def test_against_oracle(self):
        e, g = ExpParams(0.05), GammaParams(2.0, 4.0)
        got = correct.correct_exp_gamma(50.0, e, g)
        ref = oracle.posterior_mean_quadrature(50.0, ExpGamma(e, g), Q)
        assert got == pytest.approx(ref, rel=1e-6)

    def test_negative_rate_branch(self):
        # theta > 1/beta flips the exponent sign; series branch
        e, g = ExpParams(0.5), GammaParams(2.0, 4.0)
        got = correct.correct_exp_gamma(30.0, e, g)
        ref = oracle.posterior_mean_quadrature(30.0, ExpGamma(e, g), Q)
        assert got == pytest.approx(ref, rel=1e-6)

    def test_large_negative_rate_asymptotic_branch(self):
        e, g = ExpParams(30.0), GammaParams(1.5, 2.0)
        got = correct.correct_exp_gamma(40.0, e, g)   # lam*p ~ -1180
        ref = oracle.posterior_mean_quadrature(40.0, ExpGamma(e, g), Q)
        assert got == pytest.approx(ref, rel=1e-5)


class TestGammaNormal:
    def test_alpha_one_matches_exp_normal(self):
        b = NormalParams(10.0, 2.0)
        got = correct.correct_gamma_normal(100.0, GammaParams(1.0, 100.0), b)
        ref = oracle.posterior_mean_quadrature(
            100.0, ExpNormal(ExpParams(0.01), b), Q)
        assert got == pytest.approx(ref, rel=1e-8)

    def test_sigma_to_zero_limit(self):
        g, b = GammaParams(3.0, 2.0), NormalParams(5.0, 2e-4)
        got = correct.correct_gamma_normal(11.0, g, b)
        assert got == pytest.approx(11.0 - 5.0, abs=1e-3 * g.beta)

    def test_shifted_shape_path_matches_direct(self):
        g, b = GammaParams(3.0, 2.0), NormalParams(5.0, 1.5)
        got = correct.correct_gamma_normal(30.0, g, b)
        ref = oracle.posterior_mean_quadrature(30.0, GammaNormal(g, b), Q)
        assert got == pytest.approx(ref, rel=1e-6)

    def test_grid_backend_agrees(self):
        g, b = GammaParams(2.0, 50.0), NormalParams(100.0, 15.0)
        ps = np.linspace(120.0, 400.0, 15)
        grid = correct.gamma_normal_grid_posterior(ps, g, b)
        quadv = np.array([correct.correct_gamma_normal(float(p), g, b) for p in ps])
        assert np.max(np.abs(grid - quadv) / quadv) < 1e-4


class TestSeriesCorrectors:
    def test_exp_lognormal_against_oracle(self):
        e, l = ExpParams(0.05), LognormalParams(1.0, 0.6)
        got, info = correct.correct_exp_lognormal(40.0, e, l, with_info=True)
        ref = oracle.posterior_mean_quadrature(40.0, ExpLognormal(e, l), Q)
        assert info.path == "series"
        assert got == pytest.approx(ref, rel=1e-4)

    def test_exp_lognormal_theta_collapse_paths_agree(self):
        l = LognormalParams(1.0, 0.6)
        got = correct.correct_exp_lognormal(40.0, ExpParams(1e-12), l)
        den = series.exp_lognormal_den_series(40.0, None, l, CFG)
        num = series.exp_lognormal_num_series(40.0, None, l, CFG)
        collapsed = 40.0 - math.exp(1.0 + 0.18 + num.log_abs - den.log_abs)
        assert got == pytest.approx(collapsed, rel=1e-9)

    def test_exp_lognormal_range(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            theta = 1.0 / float(rng.uniform(10, 60))
            mu = float(rng.uniform(0.3, 1.5))
            sig = float(rng.uniform(0.3, 0.7))
            noise_q1 = math.exp(mu + sig * (-2.33))
            p = float(rng.uniform(noise_q1 + 0.2, 5.0 / theta))
            val = correct.correct_exp_lognormal(p, ExpParams(theta),
                                                LognormalParams(mu, sig))
            assert 0.0 < val < p

    def test_gamma_lognormal_alpha_one_nesting(self):
        l = LognormalParams(0.4, 0.35)
        got = correct.correct_gamma_lognormal(26.0, GammaParams(1.0, 12.0), l)
        want = correct.correct_exp_lognormal(26.0, ExpParams(1.0 / 12.0), l)
        assert got == pytest.approx(want, rel=1e-8)

    def test_gamma_lognormal_against_oracle(self):
        g, l = GammaParams(2.0, 10.0), LognormalParams(0.5, 0.4)
        got, info = correct.correct_gamma_lognormal(60.0, g, l, with_info=True)
        ref = oracle.posterior_mean_quadrature(60.0, GammaLognormal(g, l), Q)
        assert info.path == "series"
        assert got == pytest.approx(ref, rel=1e-4)

    def test_gb_uniform_pair(self):
        assert correct.correct_gb(0.5, UNIFORM, UNIFORM) == pytest.approx(
            0.25, abs=1e-9)

    def test_gb_limit_reduction_to_exp_gamma(self):
        s = gb_from_gamma(GammaParams(1.0, 10.0), 1e4)   # exponential, theta=0.1
        b = gb_from_gamma(GammaParams(2.0, 5.0), 1e4)
        got = correct.correct_gb(30.0, s, b)
        want = correct.correct_exp_gamma(30.0, ExpParams(0.1), GammaParams(2.0, 5.0))
        assert got == pytest.approx(want, rel=1e-2)

    def test_gb_against_oracle(self):
        s, b = GBParams(1, 0.5, 1, 2, 3), GBParams(1, 0.5, 1, 1, 2)
        got, info = correct.correct_gb(0.8, s, b, with_info=True)
        ref = oracle.posterior_mean_quadrature(0.8, GBGB(s, b), Q)
        assert info.path == "series"
        assert got == pytest.approx(ref, rel=1e-3)

    def test_gb_normal_symmetric_tight_noise(self):
        got = correct.correct_gb_normal(0.9, UNIFORM, NormalParams(0.45, 0.05))
        assert got == pytest.approx(0.45, abs=1e-6)

    def test_gb_normal_limit_reduction_to_gamma_normal(self):
        s = gb_from_gamma(GammaParams(3.0, 2.0), 1e4)
        b = NormalParams(5.0, 1.5)
        got = correct.correct_gb_normal(30.0, s, b)
        want = correct.correct_gamma_normal(30.0, GammaParams(3.0, 2.0), b)
        assert got == pytest.approx(want, rel=1e-2)

    def test_gb_normal_against_oracle(self):
        s, b = GBParams(1.0, 0.5, 2.0, 1.5, 2.0), NormalParams(0.3, 0.06)
        got, info = correct.correct_gb_normal(1.4, s, b, with_info=True)
        ref = oracle.posterior_mean_quadrature(1.4, GBNormal(s, b), Q)
        assert info.path == "series"
        assert got == pytest.approx(ref, rel=1e-3)

    def test_gb_normal_divergent_point_falls_back(self):
        # outside the expansion radius the corrector must still be right,
        # via quadrature, and must say so
        s, b = GBParams(1.0, 1.0, 2.0, 1.5, 2.0), NormalParams(1.0, 0.3)
        got, info = correct.correct_gb_normal(4.0, s, b, with_info=True)
        ref = oracle.posterior_mean_quadrature(4.0, GBNormal(s, b), Q)
        assert info.path == "quadrature"
        assert info.fallback_reason is not None
        assert got == pytest.approx(ref, rel=1e-6)


class TestCorrectArray:
    def test_empty(self):
        m = ExpNormal(ExpParams(0.01), NormalParams(100.0, 15.0))
        corrected, diags = correct.correct_array(np.array([]), m)
        assert corrected.size == 0 and diags == []

    def test_identical_inputs_identical_outputs(self):
        m = ExpNormal(ExpParams(0.01), NormalParams(100.0, 15.0))
        corrected, _ = correct.correct_array(np.full(5, 123.0), m)
        assert np.all(corrected == corrected[0])

    def test_batch_equals_serial(self):
        rng = np.random.default_rng(4)
        m = ExpNormal(ExpParams(0.01), NormalParams(100.0, 15.0))
        obs = rng.exponential(100, 10000) + rng.normal(100, 15, 10000)
        batch, _ = correct.correct_array(obs, m)
        one_by_one = np.array([correct.correct_rma(float(p), m.signal, m.noise)
                               for p in obs])
        np.testing.assert_array_equal(batch, one_by_one)
        assert np.all((batch > 0) & (batch < obs))

    def test_errors_collected_not_raised(self):
        m = ExpNormal(ExpParams(0.001), NormalParams(500.0, 4.0))
        obs = np.array([5000.0, 1.0, 5200.0])   # middle point underflows
        corrected, diags = correct.correct_array(obs, m)
        assert math.isnan(corrected[1])
        assert diags[1].path == "error"
        assert np.isfinite(corrected[0]) and np.isfinite(corrected[2])

    def test_series_model_diagnostics(self):
        m = GBGB(GBParams(1, 0.5, 1, 2, 3), GBParams(1, 0.5, 1, 1, 2))
        obs = np.array([0.5, 0.8, 3.0])   # last one outside series region
        corrected, diags = correct.correct_array(obs, m)
        assert diags[0].path == "series" and diags[1].path == "series"
        assert diags[2].path == "quadrature"
        assert np.all(np.isfinite(corrected))
