import csv
import logging

import allure
import numpy as np
import pytest

from diffusion import samplers
from diffusion.dm_configs import DM_CONFIGS, create_dm_config
from evaluation import metrics
from oracle import gmm_oracle
from oracle.gmm_oracle import GmmSpec, OracleDenoiser

logger = logging.getLogger("TestMetrics")


def _read(path):
    with open(path, newline='') as f:
        return list(csv.reader(f))


@allure.feature("Metrics")
class TestJacobianFrobenius:
    @pytest.mark.parametrize("sigma", [0.05, 0.5, 2.0])
    def test_single_gaussian_closed_form(self, sigma):
        """The ideal denoiser of N(m, s^2 I) is linear with Jacobian s^2 / (s^2 + sigma^2) I."""
        spec = GmmSpec.single((0.2, 0.1), 0.3)
        est, err = metrics.jacobian_frobenius_denoiser(OracleDenoiser(spec), sigma, 200, 0, spec)
        expected = 2 * (0.09 / (0.09 + sigma ** 2)) ** 2
        assert est == pytest.approx(expected, rel=1e-6)
        assert err == pytest.approx(0.0, abs=1e-6)

    def test_decreasing_at_large_sigma(self, gmm):
        values = [metrics.jacobian_frobenius_denoiser(OracleDenoiser(gmm), s, 2000, 1, gmm)[0] for s in (1, 2, 5)]
        logger.info(f"J_F at sigma 1, 2, 5: {values}")
        assert values[0] > values[1] > values[2]
        assert values[2] < 0.01

    def test_small_sigma_is_near_identity(self, gmm):
        est, _ = metrics.jacobian_frobenius_denoiser(OracleDenoiser(gmm), 0.005, 2000, 2, gmm)
        assert est == pytest.approx(2 * (0.0016 / (0.0016 + 0.005 ** 2)) ** 2, rel=0.02)

    def test_exact_and_finite_difference_agree(self, tiny_params, edm):
        from diffusion.denoiser import NetworkDenoiser
        D = NetworkDenoiser(tiny_params, edm)
        exact, _ = metrics.jacobian_frobenius_denoiser(D, 0.4, 64, 3, exact=True)
        fd, _ = metrics.jacobian_frobenius_denoiser(D, 0.4, 64, 3, exact=False)
        assert exact == pytest.approx(fd, rel=1e-6)

    def test_needs_two_draws(self, gmm):
        with pytest.raises(ValueError):
            metrics.jacobian_frobenius_denoiser(OracleDenoiser(gmm), 1.0, 1, 0)

    def test_identity_map_end_to_end(self):
        class Identity:
            stochastic = False

            def __call__(self, x):
                return x
        est, _ = metrics.jacobian_frobenius_endtoend(Identity(), 100, 0)
        assert est == pytest.approx(2.0, rel=1e-8)
        scaled, _ = metrics.jacobian_frobenius_endtoend(Identity(), 100, 0, input_scale=3.0)
        assert scaled == pytest.approx(18.0, rel=1e-8)

    def test_single_gaussian_flow_end_to_end(self):
        spec = GmmSpec.single((0.5, -0.3), 0.1)
        schedule = samplers.ScheduleSpec(200)
        flow = samplers.DeterministicDdimMap(OracleDenoiser(spec), schedule)
        est, _ = metrics.jacobian_frobenius_endtoend(flow, 16, 0, input_scale=schedule.sigma_max)
        expected = 2 * 80.0 ** 2 * (0.01 + 0.002 ** 2) / (0.01 + 80.0 ** 2)
        assert est == pytest.approx(expected, rel=0.05)

    def test_stochastic_map_rejected(self):
        class Noisy:
            stochastic = True

            def __call__(self, x):
                return x
        with pytest.raises(ValueError):
            metrics.jacobian_frobenius_endtoend(Noisy(), 10, 0)

    def test_complexity_report_csv(self, gmm, tmp_path):
        report = metrics.complexity_report(OracleDenoiser(gmm), [0.1, 1.0], 64, 0, gmm,
                                           samplers.ScheduleSpec(10), 32)
        rows = _read(report.to_csv(str(tmp_path / 'complexity.csv')))
        assert rows[0] == ['kind', 'sigma', 'jf_estimate', 'stderr']
        assert [r[0] for r in rows[1:]] == ['denoiser', 'denoiser', 'end_to_end']
        assert rows[3][1] == 'nan'


@allure.feature("Metrics")
class TestVariance:
    def test_loss_variance_scales_as_one_over_k(self, gmm, edm, tiny_params):
        point = gmm_oracle.sample_data(gmm, 1, 4)[0]
        ks = [1, 2, 4, 8, 16, 32]
        slope, variances = metrics.loss_variance_slope(tiny_params, edm, point, ks, 10000, 6)
        ratio = variances[4] / variances[0]
        logger.info(f"slope {slope:.4f}, Var(16)/Var(1) = {ratio:.4f}")
        assert slope == pytest.approx(-1.0, abs=0.15)
        assert 1 / 24 <= ratio <= 1 / 10

    def test_loss_variance_needs_two_reseeds(self, gmm, edm, tiny_params):
        with pytest.raises(ValueError):
            metrics.loss_variance(tiny_params, edm, gmm_oracle.sample_data(gmm, 1, 0)[0], 1, 1, 0)

    def test_gradient_variance_report(self, gmm, edm, tiny_params, tmp_path):
        point = gmm_oracle.sample_data(gmm, 1, 1)[0]
        report = metrics.gradient_variance_experiment(tiny_params, edm, point, [4, 1], 200, 2)
        assert [e.K for e in report.entries] == [1, 4]
        ratio = report.ratio(4, 1)
        logger.info(f"gradient variance ratio K=4 / K=1: {ratio:.3f}")
        assert 0.1 < ratio < 0.5
        for entry in report.entries:
            assert len(entry.bin_edges) == metrics.HISTOGRAM_BINS + 1
            assert entry.counts.sum() <= tiny_params.num_parameters
        assert _read(report.to_csv(str(tmp_path / 'v.csv')))[0] == ['K', 'mean_variance']
        assert _read(report.histogram_csv(str(tmp_path / 'h.csv')))[0] == ['K', 'bin_low', 'bin_high', 'count']

    def test_gradient_variance_needs_reseeds(self, gmm, edm, tiny_params):
        with pytest.raises(ValueError):
            metrics.gradient_variance_experiment(tiny_params, edm, gmm_oracle.sample_data(gmm, 1, 0)[0], [1], 50, 0)

    def test_report_orders_k(self):
        entry = metrics.VarianceEntry(2, 1.0, np.zeros(3), np.zeros(2))
        with pytest.raises(ValueError):
            metrics.VarianceReport([entry, metrics.VarianceEntry(1, 1.0, np.zeros(3), np.zeros(2))])


@allure.feature("Metrics")
class TestTables:
    def test_vicinity_table_rows(self, gmm):
        data = gmm_oracle.sample_data(gmm, 5000, 0)
        table = metrics.vicinity_table(gmm, data)
        assert [h for h, _ in table] == [1, 2, 3, 4, 5, 6]
        fractions = [f for _, f in table]
        assert fractions == sorted(fractions)

    def test_weighting_table(self):
        configs = [create_dm_config(k) for k in DM_CONFIGS]
        rows = metrics.weighting_table(configs, [0.01, 1.0])
        assert len(rows) == 2 * len(configs)
        edm_rows = [r for r in rows if r[0] == 'edm']
        assert all(r[4] == pytest.approx(1.0) for r in edm_rows)

    def test_churn_grid(self, gmm):
        rows = metrics.churn_grid(OracleDenoiser(gmm), gmm, samplers.ScheduleSpec(30), [0.0, 10.0], 300, 1)
        assert [r[1] for r in rows] == [0.0, 10.0]
        assert all(0.0 <= r[2] <= 1.0 for r in rows)

    def test_churn_grid_with_guidance(self, gmm):
        cond = OracleDenoiser(GmmSpec.single(gmm.means[0], gmm.component_std))
        rows = metrics.churn_grid(cond, gmm, samplers.ScheduleSpec(30), [0.0], 300, 2,
                                  guidance_scales=(1.0, 2.0), d_uncond=OracleDenoiser(gmm), label=0)
        assert [r[0] for r in rows] == [1.0, 2.0]
        assert rows[0][2] >= 0.9


@pytest.mark.slow
@allure.feature("Metrics")
class TestComplexityAcceptance:
    def test_end_to_end_dominates_denoiser(self, gmm):
        sigmas = [0.005, 0.02, 0.1, 0.5, 1.0, 2.0, 5.0]
        report = metrics.complexity_report(OracleDenoiser(gmm), sigmas, 4000, 0, gmm,
                                           samplers.ScheduleSpec(50), 20000)
        worst = max(est for _, est, _ in report.per_sigma)
        logger.info(f"end-to-end {report.end_to_end[0]:.4g} vs per-sigma max {worst:.4g}")
        assert report.end_to_end[0] >= 10 * worst
