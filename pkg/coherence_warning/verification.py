"""Forecast and event verification: point and probability scores, SPI and onsets."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .forecast_dist import EmptyBatchError
from .timeseries import DataError

logger = logging.getLogger(__name__)

UNDEFINED = float("nan")
SPI_CLAMP = 1e-6
MIN_CALIBRATION_DAYS = 5 * 365


class DegenerateFitError(DataError):
    """A calendar month of the calibration period cannot support a gamma fit."""

    pass


def _pairs(pred: np.ndarray, obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError("forecast and observation arrays must be aligned")
    keep = np.isfinite(pred) & np.isfinite(obs)
    if not np.any(keep):
        raise EmptyBatchError("no observed forecast/observation pair")
    return pred[keep], obs[keep]


def rmse(pred: np.ndarray, obs: np.ndarray) -> float:
    p, o = _pairs(pred, obs)
    return float(np.sqrt(np.mean((p - o) ** 2)))


def mae(pred: np.ndarray, obs: np.ndarray) -> float:
    p, o = _pairs(pred, obs)
    return float(np.mean(np.abs(p - o)))


def brier(prob: np.ndarray, obs: np.ndarray, threshold: float) -> float:
    """Mean squared difference between exceedance probability and obs > threshold."""
    p, o = _pairs(prob, obs)
    if np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(np.mean((p - (o > threshold)) ** 2))


@dataclass
class ContingencyTable:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def pod(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else UNDEFINED

    @property
    def far(self) -> float:
        total = self.hits + self.false_alarms
        return self.false_alarms / total if total else UNDEFINED


def pod_far(
    forecast: np.ndarray, observed: np.ndarray
) -> Tuple[float, float, ContingencyTable]:
    """POD and FAR (NaN when undefined) for aligned boolean event series."""
    f = np.asarray(forecast, dtype=bool)
    o = np.asarray(observed, dtype=bool)
    if f.shape != o.shape:
        raise ValueError("forecast and observed events must be aligned")
    table = ContingencyTable(
        hits=int(np.sum(f & o)),
        misses=int(np.sum(~f & o)),
        false_alarms=int(np.sum(f & ~o)),
        correct_negatives=int(np.sum(~f & ~o)),
    )
    return table.pod, table.far, table


def bootstrap_sd(values: np.ndarray, n_boot: int = 1000, seed: int = 0) -> float:
    """Standard deviation of the sample mean under iid resampling."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise EmptyBatchError("no values to resample")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, values.size, size=(n_boot, values.size))
    return float(np.std(values[draws].mean(axis=1), ddof=1)) if n_boot > 1 else 0.0


@dataclass
class SpiCalibration:
    """Per-calendar-month gamma shape/scale and dry probability, index 0 = January."""

    alpha: np.ndarray
    beta: np.ndarray
    q: np.ndarray


@dataclass
class SpiSeries:
    times: pd.DatetimeIndex
    spi: np.ndarray
    window: int
    calibration: SpiCalibration


def fit_spi_calibration(values: np.ndarray, months: np.ndarray) -> SpiCalibration:
    """
    Thom gamma fit of positive accumulations and a dry probability per calendar month.

    A = ln(mean) - mean(ln x); alpha = (1 + sqrt(1 + 4A/3)) / (4A); beta = mean / alpha.
    """
    values = np.asarray(values, dtype=np.float64)
    months = np.asarray(months)
    alpha, beta, q = np.empty(12), np.empty(12), np.empty(12)
    for m in range(1, 13):
        sample = values[(months == m) & np.isfinite(values)]
        if sample.size == 0:
            raise DegenerateFitError(f"month {m}: no calibration accumulations")
        positive = sample[sample > 0.0]
        if positive.size < 2:
            raise DegenerateFitError(
                f"month {m}: calibration accumulations are (almost) all dry"
            )
        a = np.log(positive.mean()) - np.mean(np.log(positive))
        if not a > 0.0:
            raise DegenerateFitError(
                f"month {m}: calibration accumulations are constant"
            )
        alpha[m - 1] = (1.0 + np.sqrt(1.0 + 4.0 * a / 3.0)) / (4.0 * a)
        beta[m - 1] = positive.mean() / alpha[m - 1]
        q[m - 1] = 1.0 - positive.size / sample.size
    return SpiCalibration(alpha=alpha, beta=beta, q=q)


def spi_transform(
    values: np.ndarray, months: np.ndarray, calibration: SpiCalibration
) -> np.ndarray:
    """Map accumulations through clamped H = q + (1 - q) G(x), then Phi^-1."""
    values = np.asarray(values, dtype=np.float64)
    index = np.asarray(months) - 1
    a, b, q = calibration.alpha[index], calibration.beta[index], calibration.q[index]
    finite = np.isfinite(values)
    x = np.where(finite, np.maximum(values, 0.0), 0.0)
    h = q + (1.0 - q) * stats.gamma.cdf(x, a, scale=b)
    h = np.clip(h, SPI_CLAMP, 1.0 - SPI_CLAMP)
    return np.where(finite, stats.norm.ppf(h), np.nan)


def spi(
    accum: np.ndarray,
    times: pd.DatetimeIndex,
    calibration_mask: Optional[np.ndarray] = None,
    window: int = 90,
) -> SpiSeries:
    """
    Standardized Precipitation Index of a trailing accumulation path.

    Args:
        accum: accumulation values, NaN during spin-up or where incomplete
        times: timestamps of ``accum``
        calibration_mask: steps forming the calibration period (default: all)
        window: accumulation length in steps, recorded on the result

    Returns:
        SpiSeries; NaN where the accumulation is undefined
    """
    accum = np.asarray(accum, dtype=np.float64)
    if calibration_mask is None:
        mask = np.ones(accum.shape[0], dtype=bool)
    else:
        mask = np.asarray(calibration_mask, dtype=bool)
    calib_times = times[mask & np.isfinite(accum)]
    min_span = pd.Timedelta(days=MIN_CALIBRATION_DAYS)
    if len(calib_times) == 0 or (calib_times[-1] - calib_times[0]) < min_span:
        raise DegenerateFitError(
            "SPI calibration period must span at least five years of accumulations"
        )
    months = times.month.to_numpy()
    calibration = fit_spi_calibration(np.where(mask, accum, np.nan), months)
    values = spi_transform(accum, months, calibration)
    logger.debug(
        f"SPI over {len(times)} steps, calibration on {len(calib_times)} accumulations"
    )
    return SpiSeries(times=times, spi=values, window=window, calibration=calibration)


def onset_indices(
    spi_values: np.ndarray, level: float = -1.0, persistence: int = 2
) -> List[int]:
    """Start of every run with SPI < level lasting at least ``persistence`` steps."""
    below = np.asarray(spi_values, dtype=np.float64) < level
    padded = np.concatenate([[False], below, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [
        int(start)
        for start, stop in zip(edges[::2], edges[1::2])
        if stop - start >= persistence
    ]


def spi_onset(series: SpiSeries) -> List[pd.Timestamp]:
    """Drought onsets: first of two consecutive updates with SPI < -1."""
    return [series.times[i] for i in onset_indices(series.spi)]


def rolling_sum(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing ``window``-step sum; NaN until a full window of observations exists."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    out = np.full(values.shape[0], np.nan)
    if values.shape[0] >= window:
        windows = np.lib.stride_tricks.sliding_window_view(values, window)
        out[window - 1 :] = windows.sum(axis=-1)
    return out


def flood_onset(precip: np.ndarray, window: int, threshold: float) -> List[int]:
    """First step of each episode whose trailing ``window`` sum tops ``threshold``."""
    sums = rolling_sum(precip, window)
    above = np.where(np.isfinite(sums), sums > threshold, False)
    padded = np.concatenate([[False], above, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [int(start) for start in edges[::2]]


def forecast_spi_path(
    forecast_means: np.ndarray,
    months: np.ndarray,
    calibration: SpiCalibration,
    window: int = 90,
) -> np.ndarray:
    """SPI of trailing forecast-mean sums, mapped with the observed calibration."""
    return spi_transform(rolling_sum(forecast_means, window), months, calibration)


def spi3_rmse(forecast_spi: np.ndarray, observed_spi: np.ndarray) -> float:
    """RMSE between forecast-derived and observed SPI over steps where both exist."""
    return rmse(forecast_spi, observed_spi)
