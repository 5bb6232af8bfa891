"""Reference forecasts: persistence and calendar-month climatology."""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .forecast_dist import TwoPartDist, fit_two_part, mean

logger = logging.getLogger(__name__)


def persistence_forecast(precip: np.ndarray, lead: int) -> np.ndarray:
    """Forecast issued at t for t + lead is the amount observed at t."""
    if lead < 1:
        raise ValueError("lead must be >= 1")
    return np.asarray(precip, dtype=np.float64).copy()


@dataclass
class Climatology:
    """Two-part distribution of precipitation per calendar month, fitted on training."""

    monthly: Dict[int, TwoPartDist]

    @classmethod
    def fit(
        cls, precip: np.ndarray, months: np.ndarray, mask: Optional[np.ndarray] = None
    ) -> "Climatology":
        precip = np.asarray(precip, dtype=np.float64)
        months = np.asarray(months)
        keep = np.isfinite(precip)
        if mask is not None:
            keep &= np.asarray(mask, dtype=bool)
        pooled = fit_two_part(precip[keep])
        monthly = {}
        for m in range(1, 13):
            sample = precip[keep & (months == m)]
            if sample.size == 0 or np.count_nonzero(sample > 0.0) < 2:
                logger.debug(
                    f"Climatology month {m}: too few wet values, using pooled fit"
                )
                monthly[m] = pooled
            else:
                monthly[m] = fit_two_part(sample)
        return cls(monthly=monthly)

    def distribution(self, months: np.ndarray) -> TwoPartDist:
        """Distribution valid at each of ``months`` (arrays aligned with the input)."""
        months = np.asarray(months)
        fits = [self.monthly[int(m)] for m in months]
        return TwoPartDist(
            np.array([f.pi0 for f in fits], dtype=np.float64),
            np.array([f.mu for f in fits], dtype=np.float64),
            np.array([f.sigma for f in fits], dtype=np.float64),
        )

    def point(self, months: np.ndarray) -> np.ndarray:
        return np.asarray(mean(self.distribution(months)), dtype=np.float64)
