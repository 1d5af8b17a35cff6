import logging
import math

import allure
import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from privacy import accountant
from privacy.accountant import CalibrationError, DpBudget, RdpCurve

logger = logging.getLogger("TestAccountant")

MNIST_Q = 4096 / 60000
MNIST_T = 300 * round(60000 / 4096)
DELTA = 1e-5


def _rdp_by_quadrature(alpha, q, sigma):
    """D_alpha((1-q) N(0, s^2) + q N(1, s^2) || N(0, s^2)) by numerical integration."""
    def integrand(x):
        log_p = np.logaddexp(math.log1p(-q) + norm.logpdf(x, 0, sigma), math.log(q) + norm.logpdf(x, 1, sigma))
        return math.exp(alpha * log_p - (alpha - 1) * norm.logpdf(x, 0, sigma))
    value, _ = integrate.quad(integrand, -12 * sigma, alpha + 12 * sigma, points=[0.0, 1.0, float(alpha)],
                              limit=500, epsabs=0, epsrel=1e-10)
    return math.log(value) / (alpha - 1)


TRIPLES = [(a, q, s) for a in (2, 3, 5, 8) for q, s in ((0.01, 1.0), (0.1, 1.0), (0.5, 2.0), (0.9, 5.0), (0.25, 0.8))]


@allure.feature("Accountant")
class TestSubsampledGaussian:
    @pytest.mark.parametrize("alpha,q,sigma", TRIPLES)
    def test_matches_quadrature(self, alpha, q, sigma):
        closed = accountant.rdp_subsampled_gaussian(alpha, q, sigma)
        numeric = _rdp_by_quadrature(alpha, q, sigma)
        logger.info(f"alpha={alpha} q={q} sigma={sigma}: {closed:.10g} vs {numeric:.10g}")
        assert abs(closed - numeric) < 1e-6

    def test_full_sampling_is_plain_gaussian(self):
        for a in (2, 7, 32):
            assert accountant.rdp_subsampled_gaussian(a, 1.0, 1.3) == accountant.rdp_gaussian(a, 1.3)

    def test_no_sampling_costs_nothing(self):
        assert accountant.rdp_subsampled_gaussian(10, 0.0, 0.5) == 0.0

    def test_infinite_noise_costs_nothing(self):
        assert accountant.rdp_gaussian(4, math.inf) == 0.0

    def test_monotone_in_q_and_sigma(self):
        base = accountant.rdp_subsampled_gaussian(8, 0.05, 1.0)
        assert accountant.rdp_subsampled_gaussian(8, 0.1, 1.0) > base
        assert accountant.rdp_subsampled_gaussian(8, 0.05, 2.0) < base

    def test_rejects_fractional_order(self):
        with pytest.raises(ValueError):
            accountant.rdp_subsampled_gaussian(2.5, 0.1, 1.0)


@allure.feature("Accountant")
class TestCompositionAndConversion:
    def test_composition_is_linear(self):
        curve = accountant.rdp_curve(0.01, 1.1)
        composed = accountant.compose(curve, 250)
        assert np.allclose(composed.epsilons, 250 * np.asarray(curve.epsilons))
        assert composed.orders == curve.orders

    def test_zero_steps(self):
        budget = accountant.epsilon_for(1.0, 0.1, 0, DELTA)
        assert budget.epsilon == 0.0

    def test_empty_curve_rejected(self):
        with pytest.raises(ValueError):
            accountant.to_dp(RdpCurve((), ()), DELTA)

    def test_delta_range(self):
        with pytest.raises(ValueError):
            accountant.to_dp(accountant.rdp_curve(0.1, 1.0), 1.0)

    def test_classic_conversion_by_hand(self):
        curve = RdpCurve((2, 3), (1.0, 0.5))
        budget = accountant.to_dp(curve, DELTA)
        expected = min(1.0 + math.log(1 / DELTA), 0.5 + math.log(1 / DELTA) / 2)
        assert budget.epsilon == pytest.approx(expected)
        assert budget.order == 3

    def test_refined_is_tighter(self):
        curve = accountant.compose(accountant.rdp_curve(MNIST_Q, 2.48779), MNIST_T)
        assert accountant.to_dp(curve, DELTA, refined=True).epsilon < accountant.to_dp(curve, DELTA).epsilon

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            RdpCurve((3, 2), (0.1, 0.1))
        with pytest.raises(ValueError):
            RdpCurve((2,), (-1.0,))


@allure.feature("Accountant")
class TestNoiseTable:
    def test_mnist_steps(self):
        assert accountant.steps_for(60000, 4096, 300) == MNIST_T == 4500
        assert accountant.steps_for(60000, 4096, 300, 'ceil') == math.ceil(300 * 60000 / 4096)
        with pytest.raises(ValueError):
            accountant.steps_for(60000, 4096, 1, 'floor')

    @pytest.mark.parametrize("sigma,low,high", [(18.28125, 0.85, 1.15), (2.48779, 8.5, 11.5)])
    def test_table_sigmas(self, sigma, low, high):
        budget = accountant.epsilon_for(sigma, MNIST_Q, MNIST_T, DELTA, refined=True)
        logger.info(f"sigma={sigma}: eps={budget.epsilon:.4f} at order {budget.order}")
        assert low <= budget.epsilon <= high

    @pytest.mark.parametrize("epsilon,sigma", [(1.0, 18.28125), (10.0, 2.48779)])
    def test_calibration_inverts_table(self, epsilon, sigma):
        found = accountant.calibrate_sigma(DpBudget(epsilon, DELTA), MNIST_Q, MNIST_T, refined=True)
        assert found == pytest.approx(sigma, rel=0.10)
        assert accountant.epsilon_for(found, MNIST_Q, MNIST_T, DELTA, refined=True).epsilon <= epsilon

    def test_calibration_round_trip(self):
        sigma = accountant.calibrate_sigma(DpBudget(3.0, DELTA), 0.01, 2000)
        eps = accountant.epsilon_for(sigma, 0.01, 2000, DELTA).epsilon
        assert eps <= 3.0
        assert eps == pytest.approx(3.0, rel=1e-2)

    def test_unreachable_target(self):
        with pytest.raises(CalibrationError):
            accountant.calibrate_sigma(DpBudget(1e-6, DELTA), 0.5, 10000)

    def test_calibration_without_steps(self):
        assert accountant.calibrate_sigma(DpBudget(1.0, DELTA), 0.1, 0) == accountant.DEFAULT_BRACKET[0]

    def test_classical_gaussian(self):
        assert accountant.classical_gaussian_sigma(1.0, DELTA) == pytest.approx(math.sqrt(2 * math.log(1.25e5)))
        assert accountant.classical_gaussian_sigma(2.0, DELTA, clip=3.0) == pytest.approx(
            1.5 * accountant.classical_gaussian_sigma(1.0, DELTA))

    def test_account_rows(self):
        result = accountant.account(1.0, 0.01, 100, DELTA, orders=(2, 4, 8))
        rows = result.rows()
        assert [r[0] for r in rows] == [2.0, 4.0, 8.0]
        assert min(r[2] for r in rows) == pytest.approx(result.budget.epsilon)


@allure.feature("Accountant")
class TestEpsilonShape:
    QS = (0.001, 0.01, 0.1, 0.5)
    SIGMAS = (0.6, 1.0, 2.0, 5.0)
    STEPS = (1, 10, 100, 1000)

    def test_monotone_over_grid(self):
        eps = np.array([[[accountant.epsilon_for(s, q, T, DELTA).epsilon for T in self.STEPS]
                         for s in self.SIGMAS] for q in self.QS])
        slack = 1e-12
        assert np.all(np.diff(eps, axis=0) >= -slack), "epsilon must not fall as q grows"
        assert np.all(np.diff(eps, axis=1) <= slack), "epsilon must not rise as sigma grows"
        assert np.all(np.diff(eps, axis=2) >= -slack), "epsilon must not fall as T grows"

    @pytest.mark.parametrize("target", [0.1, 0.5, 1.0])
    @pytest.mark.parametrize("delta", [1e-5, 1e-6])
    def test_single_gaussian_release_within_classical_bound(self, target, delta):
        sigma = accountant.classical_gaussian_sigma(target, delta)
        eps = accountant.epsilon_for(sigma, 1.0, 1, delta, refined=True).epsilon
        logger.info(f"target={target} delta={delta}: sigma={sigma:.4f} gives eps={eps:.4f}")
        assert eps <= target
