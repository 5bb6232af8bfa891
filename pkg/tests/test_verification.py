"""
Unit tests for forecast verification, SPI and event onsets.
"""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from coherence_warning.baselines import Climatology, persistence_forecast
from coherence_warning.forecast_dist import EmptyBatchError
from coherence_warning.verification import (
    DegenerateFitError,
    bootstrap_sd,
    brier,
    fit_spi_calibration,
    flood_onset,
    forecast_spi_path,
    mae,
    onset_indices,
    pod_far,
    rmse,
    rolling_sum,
    spi,
    spi3_rmse,
    spi_onset,
)


@pytest.fixture
def daily_gamma():
    """Thirty years of iid gamma(2, 30) accumulations on a daily grid."""
    times = pd.date_range("1980-01-01", "2009-12-31", freq="D", tz="UTC")
    rng = np.random.default_rng(8)
    return times, rng.gamma(2.0, 30.0, size=len(times))


class TestPointScores:
    """RMSE, MAE and Brier score."""

    @pytest.mark.unit
    def test_hand_values(self):
        pred, obs = np.array([1.0, 2.0, 3.0]), np.array([1.0, 4.0, 0.0])
        assert rmse(pred, obs) == pytest.approx(math.sqrt(13.0 / 3.0))
        assert mae(pred, obs) == pytest.approx(5.0 / 3.0)

    @pytest.mark.unit
    def test_missing_pairs_dropped(self):
        assert rmse(np.array([1.0, np.nan, 2.0]), np.array([1.0, 5.0, np.nan])) == 0.0
        with pytest.raises(EmptyBatchError):
            mae(np.array([np.nan]), np.array([1.0]))

    @pytest.mark.unit
    def test_misaligned(self):
        with pytest.raises(ValueError):
            rmse(np.zeros(2), np.zeros(3))

    @pytest.mark.unit
    def test_brier(self):
        prob = np.array([0.0, 1.0, 0.5, 0.2])
        obs = np.array([0.0, 30.0, 10.0, 25.0])
        expected = (0.0 + 0.0 + 0.25 + 0.64) / 4
        assert brier(prob, obs, threshold=20.0) == pytest.approx(expected)
        with pytest.raises(ValueError):
            brier(np.array([1.5]), np.array([0.0]), 5.0)

    @pytest.mark.unit
    def test_base_rate_beats_coin_flip(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            obs = rng.exponential(15.0, size=int(rng.integers(1, 300)))
            base = np.mean(obs > 20.0)
            climatological = brier(np.full(obs.size, base), obs, 20.0)
            assert climatological <= brier(np.full(obs.size, 0.5), obs, 20.0) + 1e-12


class TestContingency:
    """POD and FAR."""

    @pytest.mark.unit
    def test_counts(self):
        forecast = np.array([1, 1, 0, 0, 1], dtype=bool)
        observed = np.array([1, 0, 1, 0, 1], dtype=bool)
        pod, far, table = pod_far(forecast, observed)
        assert (table.hits, table.misses) == (2, 1)
        assert (table.false_alarms, table.correct_negatives) == (1, 1)
        assert pod == pytest.approx(2 / 3)
        assert far == pytest.approx(1 / 3)

    @pytest.mark.unit
    def test_undefined_is_nan(self):
        pod, far, _ = pod_far(np.zeros(4, dtype=bool), np.zeros(4, dtype=bool))
        assert math.isnan(pod) and math.isnan(far)

    @pytest.mark.unit
    def test_bootstrap_sd(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=400)
        sd = bootstrap_sd(values, n_boot=2000, seed=1)
        assert sd == pytest.approx(values.std() / 20.0, rel=0.15)
        assert bootstrap_sd(np.ones(10), n_boot=50) == 0.0


class TestSpi:
    """Gamma-fitted standardized precipitation index."""

    @pytest.mark.unit
    def test_thom_estimator(self, daily_gamma):
        times, values = daily_gamma
        calibration = fit_spi_calibration(values, times.month.to_numpy())
        assert np.all(np.abs(calibration.alpha - 2.0) < 0.3)
        assert np.all(np.abs(calibration.alpha * calibration.beta - 60.0) < 6.0)
        np.testing.assert_array_equal(calibration.q, 0.0)

    @pytest.mark.unit
    def test_standard_normal_on_calibration_data(self, daily_gamma):
        times, values = daily_gamma
        result = spi(values, times)
        assert abs(np.mean(result.spi)) < 0.05
        assert abs(np.std(result.spi) - 1.0) < 0.05
        assert result.window == 90

    @pytest.mark.unit
    def test_agrees_with_scipy_gamma(self, daily_gamma):
        times, values = daily_gamma
        result = spi(values, times)
        k = 0
        month = times.month[k] - 1
        a, b = result.calibration.alpha[month], result.calibration.beta[month]
        expected = stats.norm.ppf(stats.gamma.cdf(values[k], a, scale=b))
        assert result.spi[k] == pytest.approx(expected, rel=1e-9)

    @pytest.mark.unit
    def test_dry_probability_and_clamp(self, daily_gamma):
        times, values = daily_gamma
        values = values.copy()
        values[::4] = 0.0
        result = spi(values, times)
        assert np.all(result.calibration.q > 0.15)
        assert np.all(np.isfinite(result.spi))
        assert np.min(result.spi) >= stats.norm.ppf(1e-6) - 1e-12

    @pytest.mark.unit
    def test_missing_accumulations_stay_missing(self, daily_gamma):
        times, values = daily_gamma
        values = values.copy()
        values[:89] = np.nan
        result = spi(values, times)
        assert np.all(np.isnan(result.spi[:89]))
        assert np.all(np.isfinite(result.spi[89:]))

    @pytest.mark.unit
    def test_short_calibration(self, daily_gamma):
        times, values = daily_gamma
        with pytest.raises(DegenerateFitError, match="five years"):
            spi(values[:1000], times[:1000])

    @pytest.mark.unit
    def test_all_dry_month(self, daily_gamma):
        times, values = daily_gamma
        values = np.where(times.month == 7, 0.0, values)
        with pytest.raises(DegenerateFitError, match="month 7"):
            spi(values, times)

    @pytest.mark.unit
    def test_monotone_within_month(self, daily_gamma):
        times, values = daily_gamma
        values = values.copy()
        values[::5] = 0.0
        result = spi(values, times)
        months = times.month.to_numpy()
        for m in range(1, 13):
            chosen = months == m
            order = np.argsort(values[chosen], kind="stable")
            assert np.all(np.diff(result.spi[chosen][order]) >= -1e-12)


class TestOnsets:
    """Drought and flood onset detection."""

    @pytest.mark.unit
    def test_persistence(self):
        path = np.array([0.0, -1.5, 0.0, -1.2, -1.1, -2.0, 0.5, -1.3, -1.4])
        assert onset_indices(path) == [3, 7]
        assert onset_indices(path, persistence=1) == [1, 3, 7]
        assert onset_indices(np.array([np.nan, -2.0, -2.0])) == [1]

    @pytest.mark.unit
    def test_spi_onset_times(self, daily_gamma):
        times, values = daily_gamma
        values = values.copy()
        values[4999] = 500.0
        values[5000:5060] = 1.0
        series = spi(values, times)
        onsets = spi_onset(series)
        assert pd.Timestamp(times[5000]) in onsets

    @pytest.mark.unit
    def test_rolling_sum(self):
        out = rolling_sum(np.array([1.0, 2.0, 3.0, 4.0]), 3)
        np.testing.assert_array_equal(out, [np.nan, np.nan, 6.0, 9.0])
        assert np.all(np.isnan(rolling_sum(np.ones(2), 3)))
        with pytest.raises(ValueError):
            rolling_sum(np.ones(3), 0)

    @pytest.mark.unit
    def test_flood_episodes(self):
        precip = np.array([0, 0, 30, 30, 0, 0, 0, 0, 60, 0, 0], dtype=float)
        assert flood_onset(precip, 3, 50.0) == [3, 8]

    @pytest.mark.unit
    def test_onsets_match_direct_scan(self):
        def scan_runs(flags, persistence):
            starts, t = [], 0
            while t < len(flags):
                if flags[t]:
                    stop = t
                    while stop < len(flags) and flags[stop]:
                        stop += 1
                    if stop - t >= persistence:
                        starts.append(t)
                    t = stop
                else:
                    t += 1
            return starts

        rng = np.random.default_rng(40)
        for _ in range(1000):
            path = rng.normal(-0.7, 1.0, size=int(rng.integers(1, 60)))
            path[rng.random(path.size) < 0.05] = np.nan
            persistence = int(rng.integers(1, 4))
            flags = [bool(v < -1.0) for v in path]
            expected = scan_runs(flags, persistence)
            assert onset_indices(path, persistence=persistence) == expected

            precip = rng.exponential(10.0, size=int(rng.integers(1, 60)))
            precip[rng.random(precip.size) < 0.03] = np.nan
            window = int(rng.integers(1, 5))
            above = [
                t >= window - 1 and bool(np.sum(precip[t - window + 1 : t + 1]) > 40.0)
                for t in range(precip.size)
            ]
            assert flood_onset(precip, window, 40.0) == scan_runs(above, 1)

    @pytest.mark.unit
    def test_forecast_spi_path(self, daily_gamma):
        times, values = daily_gamma
        sums = rolling_sum(values, 90)
        observed = spi(sums, times)
        months = times.month.to_numpy()
        path = forecast_spi_path(values, months, observed.calibration, window=90)
        np.testing.assert_allclose(path[89:], observed.spi[89:])
        assert spi3_rmse(path, observed.spi) == pytest.approx(0.0, abs=1e-12)


class TestBaselines:
    """Persistence and climatology reference forecasts."""

    @pytest.mark.unit
    def test_persistence(self):
        precip = np.array([0.0, 3.0, 1.0])
        np.testing.assert_array_equal(persistence_forecast(precip, 2), precip)
        with pytest.raises(ValueError):
            persistence_forecast(precip, 0)

    @pytest.mark.unit
    def test_monthly_climatology(self):
        months = np.array([1] * 6 + [2] * 6)
        precip = np.array(
            [0, 0, math.e, math.e, math.e**3, math.e**3] + [0, 0, 0, 0, 0, 5.0]
        )
        clim = Climatology.fit(precip, months)

        jan = clim.monthly[1]
        assert jan.pi0 == pytest.approx(1 / 3)
        assert jan.mu == pytest.approx(2.0)
        assert clim.monthly[2] is clim.monthly[3]
        assert clim.point(np.array([1]))[0] == pytest.approx((2 / 3) * math.exp(2.5))

    @pytest.mark.unit
    def test_mask_restricts_fit(self):
        months = np.ones(4, dtype=int)
        precip = np.array([1.0, 1.0, 100.0, 100.0])
        mask = np.array([True, True, False, False])
        clim = Climatology.fit(precip, months, mask=mask)
        assert clim.monthly[1].pi0 == 0.0
