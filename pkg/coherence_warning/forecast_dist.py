"""Two-part zero-inflated log-normal predictive distribution for precipitation."""

import logging
import math
from dataclasses import dataclass
from typing import Any, Union

import numpy as np
from scipy import integrate, special, stats

from .timeseries import DataError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

LOG_SIGMA_MIN = math.log(1e-3)
LOG_SIGMA_MAX = math.log(1e3)
TAIL_PROB = 1e-9
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class EmptyBatchError(DataError):
    """No observed pair to score."""

    pass


@dataclass(frozen=True)
class TwoPartDist:
    """Point mass ``pi0`` at zero mixed with a log-normal(mu, sigma) for wet amounts.

    Fields may be scalars or equally shaped arrays.
    """

    pi0: ArrayLike
    mu: ArrayLike
    sigma: ArrayLike

    def __post_init__(self) -> None:
        pi0 = np.asarray(self.pi0, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any((pi0 < 0.0) | (pi0 > 1.0)):
            raise ValueError("pi0 must lie in [0, 1]")
        if np.any(~(sigma > 0.0)):
            raise ValueError("sigma must be positive")

    def __getitem__(self, index: Any) -> "TwoPartDist":
        return TwoPartDist(
            np.asarray(self.pi0)[index],
            np.asarray(self.mu)[index],
            np.asarray(self.sigma)[index],
        )

    @classmethod
    def from_raw(
        cls, logit_pi0: ArrayLike, mu: ArrayLike, log_sigma: ArrayLike
    ) -> "TwoPartDist":
        """Build from raw head outputs; log sigma is clamped to ln 1e-3..ln 1e3."""
        return cls(
            pi0=special.expit(logit_pi0),
            mu=np.asarray(mu, dtype=np.float64),
            sigma=np.exp(np.clip(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)),
        )


def cdf(d: TwoPartDist, x: ArrayLike) -> ArrayLike:
    """
    Two-part CDF.

    F(x) is 0 below zero, pi0 at zero and pi0 + (1 - pi0) Phi((ln x - mu) / sigma)
    above.
    """
    x = np.asarray(x, dtype=np.float64)
    pi0 = np.asarray(d.pi0, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = (np.log(np.where(x > 0.0, x, 1.0)) - d.mu) / d.sigma
    wet = pi0 + (1.0 - pi0) * special.ndtr(z)
    out = np.where(x > 0.0, wet, np.where(x < 0.0, 0.0, pi0))
    return out if out.ndim else float(out)


def quantile(d: TwoPartDist, p: ArrayLike) -> ArrayLike:
    """Inverse of :func:`cdf`; 0 for p <= pi0."""
    p = np.asarray(p, dtype=np.float64)
    pi0 = np.asarray(d.pi0, dtype=np.float64)
    wet_share = np.where(p > pi0, (p - pi0) / np.where(pi0 < 1.0, 1.0 - pi0, 1.0), 0.5)
    wet = np.exp(d.mu + d.sigma * special.ndtri(np.clip(wet_share, 0.0, 1.0)))
    out = np.where(p > pi0, wet, 0.0)
    return out if out.ndim else float(out)


def sample(d: TwoPartDist, seed: int, n: int) -> np.ndarray:
    """``n`` draws: zero with probability pi0, log-normal otherwise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    dry = rng.random(n) < d.pi0
    amounts = rng.lognormal(mean=d.mu, sigma=d.sigma, size=n)
    return np.where(dry, 0.0, amounts)


def mean(d: TwoPartDist) -> ArrayLike:
    """Expected amount (1 - pi0) exp(mu + sigma^2 / 2)."""
    sigma = np.asarray(d.sigma)
    out = (1.0 - np.asarray(d.pi0)) * np.exp(np.asarray(d.mu) + 0.5 * sigma**2)
    return out if np.ndim(out) else float(out)


def exceedance(d: TwoPartDist, threshold: float) -> ArrayLike:
    """P(X > threshold)."""
    out = 1.0 - np.asarray(cdf(d, threshold))
    return out if out.ndim else float(out)


def nll(d: TwoPartDist, y: ArrayLike) -> ArrayLike:
    """Negative log-likelihood of observed amounts (mass at zero, density above)."""
    y = np.asarray(y, dtype=np.float64)
    pi0 = np.asarray(d.pi0, dtype=np.float64)
    sigma = np.asarray(d.sigma, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_y = np.log(np.where(y > 0.0, y, 1.0))
        dry = -np.log(pi0)
        wet = (
            -np.log1p(-pi0)
            + log_y
            + np.log(sigma)
            + HALF_LOG_2PI
            + 0.5 * ((log_y - d.mu) / sigma) ** 2
        )
    out = np.where(y > 0.0, wet, dry)
    return out if out.ndim else float(out)


def _lognormal_partial_excess(mu: float, sigma: float, upper: float) -> float:
    """E[(X - upper)+] for X ~ log-normal(mu, sigma)."""
    log_u = math.log(upper)
    return math.exp(mu + 0.5 * sigma * sigma) * special.ndtr(
        (mu + sigma * sigma - log_u) / sigma
    ) - upper * special.ndtr((mu - log_u) / sigma)


def crps(d: TwoPartDist, y: float) -> float:
    """
    CRPS by adaptive quadrature of (F(x) - 1{x >= y})^2 over [0, U].

    The integral is split at 0, y and exp(mu); U = quantile(1 - 1e-9). The tail
    beyond U is bounded by (1 - F(U)) * (1 - pi0) * E[(X - U)+] and added.
    """
    if y < 0:
        raise ValueError("observation must be non-negative")
    pi0, mu, sigma = float(d.pi0), float(d.mu), float(d.sigma)
    single = TwoPartDist(pi0, mu, sigma)

    def below(x: float) -> float:
        return cdf(single, x) ** 2

    def above(x: float) -> float:
        return (1.0 - cdf(single, x)) ** 2

    upper = max(float(quantile(single, 1.0 - TAIL_PROB)), y)
    median = math.exp(mu)
    options = dict(epsabs=1e-10, epsrel=1e-10, limit=200)

    total = 0.0
    if y > 0.0:
        points = [median] if 0.0 < median < y else None
        total += integrate.quad(below, 0.0, y, points=points, **options)[0]
    if upper > y:
        points = [median] if y < median < upper else None
        total += integrate.quad(above, y, upper, points=points, **options)[0]
    if pi0 < 1.0 and upper > 0.0:
        survival = 1.0 - cdf(single, upper)
        excess = max(0.0, _lognormal_partial_excess(mu, sigma, upper))
        total += survival * (1.0 - pi0) * excess
    return max(0.0, total)


def crps_many(d: TwoPartDist, y: np.ndarray) -> np.ndarray:
    """Elementwise CRPS; distribution fields broadcast against the observations."""
    pi0, mu, sigma, y = np.broadcast_arrays(
        np.asarray(d.pi0, dtype=np.float64),
        np.asarray(d.mu, dtype=np.float64),
        np.asarray(d.sigma, dtype=np.float64),
        np.asarray(y, dtype=np.float64),
    )
    out = np.full(y.shape, np.nan)
    for i in np.ndindex(y.shape):
        if np.isfinite(y[i]):
            out[i] = crps(TwoPartDist(pi0[i], mu[i], sigma[i]), float(y[i]))
    return out


def crps_mean(d: TwoPartDist, y: np.ndarray) -> float:
    """Mean CRPS over observed (finite) targets."""
    scores = crps_many(d, y)
    scores = scores[np.isfinite(scores)]
    if scores.size == 0:
        raise EmptyBatchError("no observed targets to score")
    return float(np.mean(scores))


def fit_two_part(amounts: np.ndarray) -> TwoPartDist:
    """Dry fraction and log-moments of wet amounts (sd >= 1e-3)."""
    amounts = np.asarray(amounts, dtype=np.float64)
    amounts = amounts[np.isfinite(amounts)]
    if amounts.size == 0:
        raise EmptyBatchError("no amounts to fit")
    wet = amounts[amounts > 0.0]
    pi0 = 1.0 - wet.size / amounts.size
    if wet.size == 0:
        return TwoPartDist(1.0, 0.0, 1.0)
    logs = np.log(wet)
    sigma = float(np.std(logs)) if wet.size > 1 else 1.0
    return TwoPartDist(pi0, float(np.mean(logs)), max(sigma, 1e-3))
