"""Tests for the MSVG parameters, density, sampler and CSV writer."""

import dataclasses
import math

import numpy as np
import pytest
from scipy import integrate, stats

from validation import read_dataset
from vg_model import (
    Dataset,
    DatasetError,
    ParameterError,
    VgParams,
    full_loglik,
    log_density_at_mode,
    log_pdf,
    mahalanobis_sq,
    near_mode_log_density,
    population_moments,
    sample,
    write_dataset,
)


def _mixture_density(params, y):
    """Density of a d=1 point by integrating the normal-gamma mixture."""
    mu, s2, g, nu = params.mu[0], params.sigma[0, 0], params.gamma[0], params.nu

    def integrand(lam):
        return stats.norm.pdf(y, mu + g * lam, math.sqrt(lam * s2)) * stats.gamma.pdf(
            lam, nu, scale=1.0 / nu
        )

    head, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=0.0, epsrel=1e-11, limit=200)
    tail, _ = integrate.quad(
        integrand, 1.0, math.inf, epsabs=0.0, epsrel=1e-11, limit=200
    )
    return head + tail


class TestVgParams:
    def test_caches_factorisation(self):
        p = VgParams(mu=[0, 0], sigma=[[2, 1], [1, 2]], gamma=[1, 0], nu=1.5)
        assert p.d == 2
        assert p.log_det_sigma == pytest.approx(math.log(3.0))
        np.testing.assert_allclose(p.chol @ p.chol.T, [[2, 1], [1, 2]])
        assert p.gamma_quad == pytest.approx(2.0 / 3.0)
        assert p.c == pytest.approx(math.sqrt(3.0 + 2.0 / 3.0))

    def test_is_immutable(self):
        p = VgParams.univariate(0.0, 1.0, 0.0, 1.0)
        with pytest.raises(dataclasses.FrozenInstanceError):
            p.nu = 2.0
        assert not p.mu.flags.writeable
        assert not p.sigma.flags.writeable

    def test_replace_recomputes(self):
        p = VgParams.univariate(0.0, 1.0, 0.0, 1.0)
        q = p.replace(sigma=[[4.0]])
        assert q.log_det_sigma == pytest.approx(math.log(4.0))
        assert p.log_det_sigma == 0.0

    def test_rejects_indefinite_sigma(self):
        with pytest.raises(ParameterError):
            VgParams(mu=[0, 0], sigma=[[1, 2], [2, 1]], gamma=[0, 0], nu=1.0)

    def test_rejects_asymmetric_sigma(self):
        with pytest.raises(ParameterError):
            VgParams(mu=[0, 0], sigma=[[1, 0.5], [0, 1]], gamma=[0, 0], nu=1.0)

    @pytest.mark.parametrize("nu", [0.0, -1.0, math.inf, math.nan])
    def test_rejects_bad_nu(self, nu):
        with pytest.raises(ParameterError):
            VgParams.univariate(nu=nu)

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            VgParams(mu=[0, 0], sigma=[[1.0]], gamma=[0, 0], nu=1.0)
        with pytest.raises(ParameterError):
            VgParams(mu=[0], sigma=[[1.0]], gamma=[0, 0], nu=1.0)


class TestDataset:
    def test_one_dimensional_input_is_a_column(self):
        data = Dataset([1.0, 2.0, 3.0])
        assert (data.n, data.d) == (3, 1)

    def test_rejects_non_finite(self):
        with pytest.raises(DatasetError, match="observation 1"):
            Dataset([[0.0], [math.nan]])

    def test_rejects_empty(self):
        with pytest.raises(DatasetError):
            Dataset(np.empty((0, 2)))

    def test_shifted(self):
        data = Dataset([[1.0, 2.0], [3.0, 4.0]]).shifted([1.0, -1.0])
        np.testing.assert_array_equal(data.observations, [[2.0, 1.0], [4.0, 3.0]])


class TestMahalanobis:
    def test_univariate(self):
        assert mahalanobis_sq(VgParams.univariate(), [2.0]) == pytest.approx(4.0)

    def test_zero_at_mu(self):
        p = VgParams(mu=[0.3, -1.2], sigma=[[2, 1], [1, 2]], gamma=[0, 0], nu=1.0)
        assert mahalanobis_sq(p, [0.3, -1.2]) == 0.0

    def test_bivariate_hand_inversion(self):
        p = VgParams(mu=[0, 0], sigma=[[2, 1], [1, 2]], gamma=[0, 0], nu=1.0)
        assert mahalanobis_sq(p, [1.0, 1.0]) == pytest.approx(2.0 / 3.0, rel=1e-14)

    def test_rows(self):
        p = VgParams.univariate()
        np.testing.assert_allclose(mahalanobis_sq(p, [[1.0], [-2.0]]), [1.0, 4.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            mahalanobis_sq(VgParams.univariate(), [1.0, 2.0])


class TestLogPdf:
    def test_laplace_case(self):
        p = VgParams.univariate(0.0, 1.0, 0.0, 1.0)
        expected = math.log(math.exp(-math.sqrt(2.0)) / math.sqrt(2.0))
        assert log_pdf(p, [1.0]) == pytest.approx(expected, rel=1e-12)
        assert log_pdf(p, [1.0]) == pytest.approx(-1.7606, abs=1e-3)

    def test_matches_mixture_quadrature(self):
        p = VgParams.univariate(0.3, 2.1, 0.4, 1.7)
        assert math.exp(log_pdf(p, [1.1])) == pytest.approx(
            _mixture_density(p, 1.1), rel=1e-7
        )

    def test_random_points_match_mixture_quadrature(self):
        rng = np.random.default_rng(20240611)
        for _ in range(20):
            p = VgParams.univariate(
                mu=rng.uniform(-1, 1),
                sigma2=rng.uniform(0.5, 2.0),
                gamma=rng.uniform(-1, 1),
                nu=rng.uniform(0.3, 4.0),
            )
            y = p.mu[0] + rng.choice([-1, 1]) * rng.uniform(0.05, 3.0)
            assert math.exp(log_pdf(p, [y])) == pytest.approx(
                _mixture_density(p, y), rel=1e-6
            )

    @pytest.mark.parametrize("nu", [0.3, 0.6, 1.0, 3.0])
    @pytest.mark.parametrize("gamma", [0.0, 1.0])
    def test_integrates_to_one(self, nu, gamma):
        p = VgParams.univariate(0.2, 1.0, gamma, nu)
        mu = 0.2

        def density(y):
            return math.exp(log_pdf(p, [y]))

        opts = {"epsabs": 1e-12, "epsrel": 1e-10, "limit": 400}
        total = (
            integrate.quad(density, -math.inf, mu - 1.0, **opts)[0]
            + integrate.quad(density, mu - 1.0, mu, **opts)[0]
            + integrate.quad(density, mu, mu + 1.0, **opts)[0]
            + integrate.quad(density, mu + 1.0, math.inf, **opts)[0]
        )
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_translation_equivariance(self):
        p = VgParams(mu=[0.1, 0.2], sigma=[[1.5, 0.4], [0.4, 0.8]], gamma=[0.3, -0.2], nu=0.9)
        shift = np.array([3.7, -12.5])
        y = np.array([[0.5, 1.0], [-1.0, 0.3], [2.0, 2.0]])
        moved = p.replace(mu=p.mu + shift)
        np.testing.assert_allclose(
            log_pdf(moved, y + shift), log_pdf(p, y), rtol=0, atol=1e-12
        )

    def test_finite_limit_at_mu(self):
        p = VgParams.univariate(0.0, 1.0, 0.5, 2.0)
        assert log_pdf(p, [0.0]) == log_density_at_mode(p)
        assert math.isfinite(log_pdf(p, [0.0]))
        assert log_pdf(p, [1e-7]) == pytest.approx(log_density_at_mode(p), abs=1e-6)

    @pytest.mark.parametrize("nu", [0.2, 0.5])
    def test_unbounded_at_mu(self, nu):
        p = VgParams.univariate(0.0, 1.0, 0.0, nu)
        assert log_pdf(p, [0.0]) == math.inf

    @pytest.mark.parametrize("nu", [0.2, 0.4])
    def test_local_slope_near_mu(self, nu):
        p = VgParams.univariate(0.0, 1.0, 0.0, nu)
        z1, z2 = 1e-20, 1e-22
        slope = (log_pdf(p, [z1]) - log_pdf(p, [z2])) / (math.log(z1) - math.log(z2))
        assert slope == pytest.approx(2 * nu - 1, rel=0.02)

    def test_power_regime_matches_asymptote(self):
        p = VgParams.univariate(0.0, 1.0, 0.0, 0.2)
        z = 1e-12
        assert log_pdf(p, [z]) == pytest.approx(near_mode_log_density(p, z), abs=1e-3)

    def test_logarithmic_growth_at_half(self):
        p = VgParams.univariate(0.0, 1.0, 0.0, 0.5)
        for z in (1e-20, 1e-30):
            ratio = math.exp(log_pdf(p, [z]) - near_mode_log_density(p, z))
            assert ratio == pytest.approx(1.0, rel=0.02)

    def test_full_loglik_sums_points(self):
        p = VgParams.univariate(0.0, 1.0, 0.3, 1.2)
        data = Dataset([[0.5], [-1.0], [2.0]])
        assert full_loglik(p, data) == pytest.approx(
            sum(log_pdf(p, row) for row in data.observations), rel=1e-14
        )


class TestSample:
    def test_deterministic_given_seed(self):
        p = VgParams.univariate(0.0, 1.0, 0.5, 0.7)
        a = sample(p, 100, np.random.default_rng(7))
        b = sample(p, 100, np.random.default_rng(7))
        np.testing.assert_array_equal(a.observations, b.observations)

    def test_symmetric_mean(self):
        p = VgParams.univariate(1.5, 2.0, 0.0, 0.4)
        n = 50000
        y = sample(p, n, np.random.default_rng(1)).observations[:, 0]
        _, var = population_moments(p)
        se = math.sqrt(var[0, 0] / n)
        assert abs(y.mean() - 1.5) < 4 * se

    def test_covariance_matches_formula(self):
        p = VgParams(
            mu=[0.0, 1.0], sigma=[[1.0, 0.3], [0.3, 0.5]], gamma=[0.5, -0.3], nu=3.0
        )
        y = sample(p, 200000, np.random.default_rng(2)).observations
        mean, cov = population_moments(p)
        np.testing.assert_allclose(y.mean(axis=0), mean, atol=0.02)
        np.testing.assert_allclose(np.cov(y, rowvar=False), cov, rtol=0.03, atol=0.01)

    def test_large_nu_is_nearly_normal(self):
        p = VgParams.univariate(0.0, 1.0, 0.0, 1e4)
        y = sample(p, 100000, np.random.default_rng(3)).observations[:, 0]
        assert abs(stats.kurtosis(y)) < 0.1

    def test_rejects_empty_sample(self):
        with pytest.raises(DatasetError):
            sample(VgParams.univariate(), 0, np.random.default_rng(0))


class TestPopulationMoments:
    def test_symmetric(self):
        p = VgParams(mu=[1.0, 2.0], sigma=[[2, 1], [1, 2]], gamma=[0, 0], nu=0.7)
        mean, cov = population_moments(p)
        np.testing.assert_array_equal(mean, [1.0, 2.0])
        np.testing.assert_allclose(cov, [[2, 1], [1, 2]])

    def test_skewed_univariate(self):
        mean, cov = population_moments(VgParams.univariate(0.0, 1.0, 2.0, 0.5))
        assert mean[0] == pytest.approx(2.0)
        assert cov[0, 0] == pytest.approx(9.0)


class TestWriteDataset:
    def test_written_values_read_back_exactly(self, tmp_path):
        data = sample(VgParams.univariate(0.0, 1.0, 0.3, 0.6), 25, np.random.default_rng(4))
        path = tmp_path / "out" / "data.csv"
        write_dataset(data, str(path))
        np.testing.assert_array_equal(read_dataset(str(path)).observations, data.observations)

    def test_header(self, tmp_path):
        path = tmp_path / "data.csv"
        write_dataset(Dataset([[1.0, 2.0]]), str(path), header=["a", "b"])
        assert path.read_text().splitlines() == ["a,b", "1,2"]
