import numpy as np
import pytest
from scipy import integrate, optimize, stats

from qrfvimp.simlab.dgp import DGPSpec, generate
from qrfvimp.simlab.oracles import (
    gateaux_check,
    gaussian_risk,
    oracle_quantile,
    oracle_restricted_quantile,
    oracle_vi,
    oracle_vi_mc,
)


class TestDGP:

    def test_zero_noise_rejected(self):
        with pytest.raises(ValueError):
            DGPSpec(noise_scale=0.0)

    def test_too_many_coefficients(self):
        with pytest.raises(ValueError):
            DGPSpec(coefficients=(1, 2, 3), p=2)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            DGPSpec(kind="cubic")

    def test_covariate_means(self, rng):
        n = 10_000
        d = generate(DGPSpec(p=3), n, rng)
        assert np.all(np.abs(d.x.mean(axis=0) - 0.5) < 3 / np.sqrt(12 * n))
        assert d.x.min() >= 0 and d.x.max() <= 1

    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
    def test_residual_quantile(self, rng, tau):
        dgp = DGPSpec(coefficients=(2.0, -1.0), noise_scale=1.5)
        d = generate(dgp, 100_000, rng)
        r = d.y - dgp.mean(d.x)
        target = 1.5 * stats.norm.ppf(tau)
        se = np.sqrt(tau * (1 - tau) / 100_000) / (stats.norm.pdf(stats.norm.ppf(tau)) / 1.5)
        assert abs(np.quantile(r, tau) - target) < 4 * se

    def test_heteroscedastic_scale(self):
        dgp = DGPSpec(kind="heteroscedastic", noise_scale=2.0)
        np.testing.assert_allclose(dgp.scale(np.array([[0.0, 0.3], [1.0, 0.3]])), [2.0, 4.0])

    def test_round_trip(self):
        dgp = DGPSpec(kind="heteroscedastic", coefficients=(1.0, 0.5), noise_scale=0.7, p=4)
        assert DGPSpec.from_dict(dgp.to_dict()) == dgp


class TestOracleQuantile:

    def test_median_is_mean(self):
        dgp = DGPSpec(coefficients=(2.0, 3.0))
        assert oracle_quantile(dgp, 0.5, [0.2, 0.4]) == pytest.approx(1.6, abs=1e-15)

    def test_upper_tail(self):
        dgp = DGPSpec(coefficients=(2.0, 3.0))
        assert oracle_quantile(dgp, 0.9, [0.2, 0.4]) == pytest.approx(1.6 + 1.281552, abs=1e-6)

    def test_heteroscedastic_at_zero(self):
        het = DGPSpec(kind="heteroscedastic", coefficients=(1.0, 1.0))
        hom = DGPSpec(coefficients=(1.0, 1.0))
        assert oracle_quantile(het, 0.8, [0.0, 0.6]) == oracle_quantile(hom, 0.8, [0.0, 0.6])


def _convolution_median(c):
    """Median of c * U + eps by bisection on a 1-D quadrature CDF."""
    def cdf(y):
        return integrate.quad(lambda u: stats.norm.cdf(y - c * u), 0, 1, epsabs=1e-13)[0] - 0.5
    return optimize.bisect(cdf, -10, 10, xtol=1e-12)


class TestRestrictedQuantile:

    def test_zero_coefficient_removed(self):
        dgp = DGPSpec(coefficients=(2.0, 0.0))
        x = [0.3, 0.9]
        assert oracle_restricted_quantile(dgp, 0.7, x, (1,)) == pytest.approx(
            oracle_quantile(dgp, 0.7, x), abs=1e-10)

    def test_symmetric_convolution(self):
        dgp = DGPSpec(coefficients=(2.0, 0.0))
        q = oracle_restricted_quantile(dgp, 0.5, [0.1, 0.4], (0,))
        assert q == pytest.approx(1.0, abs=1e-8)
        assert q == pytest.approx(_convolution_median(2.0), abs=1e-8)

    def test_monotone_in_tau(self):
        dgp = DGPSpec(kind="heteroscedastic", coefficients=(1.0, 2.0))
        qs = [oracle_restricted_quantile(dgp, t, [0.5, 0.5], (1,)) for t in (0.1, 0.3, 0.5, 0.9)]
        assert np.all(np.diff(qs) > 0)

    def test_heteroscedastic_against_monte_carlo(self, rng):
        dgp = DGPSpec(kind="heteroscedastic", coefficients=(1.0, 2.0))
        x1 = 0.7
        u = rng.uniform(size=2_000_000)
        y = x1 + 2 * u + (1 + x1) * rng.standard_normal(u.size)
        q = oracle_restricted_quantile(dgp, 0.8, [x1, 0.0], (1,))
        assert np.mean(y <= q) == pytest.approx(0.8, abs=4 * np.sqrt(0.16 / u.size))

    def test_all_removed(self):
        with pytest.raises(ValueError):
            oracle_restricted_quantile(DGPSpec(), 0.5, [0.1, 0.2], (0, 1))


class TestOracleVI:
    dgp = DGPSpec(coefficients=(1.0, 0.5, 0.0), p=3)

    def test_empty(self):
        assert oracle_vi(self.dgp, 0.5, ()) == 0.0

    def test_noise_feature(self):
        assert oracle_vi(self.dgp, 0.5, (2,)) == 0.0

    @pytest.mark.parametrize("tau", [0.2, 0.5, 0.9])
    def test_nested_monotone(self, tau):
        a = oracle_vi(self.dgp, tau, (1,))
        b = oracle_vi(self.dgp, tau, (0, 1))
        c = oracle_vi(self.dgp, tau, (0,))
        assert a >= -1e-6 and c >= -1e-6
        assert a <= b + 1e-6 and c <= b + 1e-6

    def test_one_dimensional_quadrature(self):
        # independent check with scipy quad over the removed coordinate
        dgp = DGPSpec(coefficients=(1.0, 0.0))
        off = oracle_restricted_quantile(dgp, 0.3, [0.0, 0.0], (0,))
        z = stats.norm.ppf(0.3)
        base = stats.norm.pdf(z) + z * (stats.norm.cdf(z) - 0.3)
        val = integrate.quad(lambda u: gaussian_risk(off, u, 1.0, 0.3) - base, 0, 1,
                             epsabs=1e-13)[0]
        assert oracle_vi(dgp, 0.3, (0,)) == pytest.approx(val, abs=1e-10)

    def test_monte_carlo_agreement(self):
        dgp = DGPSpec(kind="heteroscedastic", coefficients=(1.0, 0.5))
        v = oracle_vi(dgp, 0.7, (1,))
        mc, se = oracle_vi_mc(dgp, 0.7, (1,), n_draws=2_000_000, rng=np.random.default_rng(4))
        assert abs(v - mc) <= 3 * se

    def test_gaussian_risk_quadrature(self):
        def integrand(y):
            return (y - 0.4) * (0.3 - (y < 0.4)) * stats.norm.pdf(y, 1.0, 2.0)
        val = (integrate.quad(integrand, -np.inf, 0.4, epsabs=1e-12)[0]
               + integrate.quad(integrand, 0.4, np.inf, epsabs=1e-12)[0])
        assert gaussian_risk(0.4, 1.0, 2.0, 0.3) == pytest.approx(val, abs=1e-8)


@pytest.mark.parametrize("tau", [0.25, 0.5, 0.9])
def test_gateaux_derivative_vanishes(tau):
    deriv, se = gateaux_check(DGPSpec(coefficients=(1.0, 0.0)), tau, rng=np.random.default_rng(9))
    assert abs(deriv) <= 3 * se
