"""
Residual-driven Shiryaev-Roberts detection.

The backward defect r_t = ||h_t - g(h_{t+1})|| is standardized against a null
calibration, turned into a pseudo-likelihood ratio Lambda_t = exp(eta z_t - psi0)
and accumulated by R_t = (1 + R_{t-1}) Lambda_t. Thresholds are chosen by Monte
Carlo so that the mean first-passage time under the null matches a target ARL0.
CUSUM and threshold detectors share the same calibration and evaluation.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import pandas as pd
from scipy import special

from . import kernels
from .rnn_core import (
    GATES,
    HiddenTrajectory,
    NumericError,
    RmModel,
    backward_errors,
    cell_step,
    forward_pass,
    projector_apply,
)
from .timeseries import DataError, InputLayout
from .verification import UNDEFINED, rolling_sum

logger = logging.getLogger(__name__)

ARL0_TOLERANCE = 0.02

NullTriple = Tuple[float, float, float]


class CalibrationError(NumericError):
    """Null calibration or threshold search failed."""

    pass


class EventFreeError(DataError):
    """Detector evaluation requires at least one reference event."""

    pass


@dataclass
class DefectSeries:
    """Backward defects; r[i] pairs h_i with h_{i+1} and is known one step later."""

    r: np.ndarray
    times: Optional[pd.DatetimeIndex] = None

    def __post_init__(self) -> None:
        self.r = np.asarray(self.r, dtype=np.float64)
        if np.any(~np.isfinite(self.r)) or np.any(self.r < 0.0):
            raise ValueError("defects must be finite and non-negative")

    @property
    def months(self) -> Optional[np.ndarray]:
        return None if self.times is None else self.times.month.to_numpy()

    def select(self, selector: Union[np.ndarray, slice]) -> "DefectSeries":
        times = None if self.times is None else self.times[selector]
        return DefectSeries(self.r[selector], times)


def defect_series(
    traj: Union[HiddenTrajectory, np.ndarray],
    model: RmModel,
    times: Optional[pd.DatetimeIndex] = None,
) -> DefectSeries:
    """r_t = ||h_t - g(h_{t+1})||, length T - 1, stamped when h_{t+1} is known."""
    r = np.linalg.norm(backward_errors(traj, model), axis=1)
    return DefectSeries(r=r, times=None if times is None else times[1:])


def log_mgf(z: np.ndarray, eta: float) -> float:
    """log of the sample mean of exp(eta z)."""
    z = np.asarray(z, dtype=np.float64)
    return float(special.logsumexp(eta * z) - math.log(z.size))


@dataclass
class NullCalibration:
    """Null location/scale of the defect, tilt eta and log-MGF psi0.

    ``monthly`` optionally holds one (mu0, sigma0, psi0) triple per calendar month.
    """

    mu0: float
    sigma0: float
    eta: float = 1.0
    psi0: float = 0.0
    monthly: Optional[Dict[int, NullTriple]] = None

    def __post_init__(self) -> None:
        if not self.sigma0 > 0.0:
            raise CalibrationError("null scale sigma0 must be positive")
        if not self.eta > 0.0:
            raise CalibrationError("tilt eta must be positive")

    def params_for(
        self, months: Optional[np.ndarray], n: int
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.monthly is None:
            return np.full(n, self.mu0), np.full(n, self.sigma0), np.full(n, self.psi0)
        if months is None:
            raise ValueError(
                "monthly null calibration needs the calendar month of every defect"
            )
        table = np.array([self.monthly[m] for m in range(1, 13)])
        index = np.asarray(months) - 1
        return table[index, 0], table[index, 1], table[index, 2]

    def to_dict(self) -> Dict[str, Any]:
        monthly = None
        if self.monthly is not None:
            monthly = {str(m): list(v) for m, v in self.monthly.items()}
        return {
            "mu0": self.mu0,
            "sigma0": self.sigma0,
            "eta": self.eta,
            "psi0": self.psi0,
            "monthly": monthly,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NullCalibration":
        monthly = data.get("monthly")
        table = None
        if monthly is not None:
            table = {
                int(m): (float(v[0]), float(v[1]), float(v[2]))
                for m, v in monthly.items()
            }
        return cls(
            mu0=float(data["mu0"]),
            sigma0=float(data["sigma0"]),
            eta=float(data["eta"]),
            psi0=float(data["psi0"]),
            monthly=table,
        )


def _null_triple(r: np.ndarray, eta: float, label: str) -> NullTriple:
    mu0 = float(np.mean(r))
    sigma0 = float(np.std(r, ddof=1))
    if not sigma0 > 0.0:
        raise CalibrationError(f"{label}: climatology defects have zero spread")
    z = np.maximum(0.0, (r - mu0) / sigma0)
    return mu0, sigma0, log_mgf(z, eta)


def estimate_null(
    clim_defects: DefectSeries,
    eta: float = 1.0,
    monthly: bool = False,
    months: Optional[np.ndarray] = None,
) -> NullCalibration:
    """
    Null statistics from held-out climatology defects.

    psi0 is the log of the sample mean of exp(eta z), so the calibration-sample
    mean of Lambda is exactly one. Monthly mode fits one triple per calendar month.
    """
    r = clim_defects.r
    if r.size < 100:
        raise CalibrationError(f"need >= 100 climatology defects, got {r.size}")
    mu0, sigma0, psi0 = _null_triple(r, eta, "global null")
    table: Optional[Dict[int, NullTriple]] = None
    if monthly:
        months = clim_defects.months if months is None else np.asarray(months)
        if months is None:
            raise CalibrationError("monthly null requires defect timestamps or months")
        table = {}
        for m in range(1, 13):
            sample = r[months == m]
            if sample.size < 30:
                raise CalibrationError(
                    f"month {m}: need >= 30 climatology defects, got {sample.size}"
                )
            table[m] = _null_triple(sample, eta, f"month {m}")
    logger.info(
        f"Null calibration: mu0={mu0:.6g} sigma0={sigma0:.6g} psi0={psi0:.6g} "
        f"monthly={monthly}"
    )
    return NullCalibration(mu0=mu0, sigma0=sigma0, eta=eta, psi0=psi0, monthly=table)


def likelihood_ratio(
    r: np.ndarray, calib: NullCalibration, months: Optional[np.ndarray] = None
) -> np.ndarray:
    """Lambda = exp(eta max(0, (r - mu0) / sigma0) - psi0)."""
    r = np.asarray(r, dtype=np.float64)
    mu0, sigma0, psi0 = calib.params_for(months, r.size)
    z = np.maximum(0.0, (r.reshape(-1) - mu0) / sigma0)
    return np.exp(calib.eta * z - psi0).reshape(r.shape)


@dataclass
class AlarmTrace:
    """Detector statistic path; ``alarms`` are 0-based steps (run length index + 1)."""

    statistic: np.ndarray
    threshold: float
    alarms: np.ndarray
    detector: str
    times: Optional[pd.DatetimeIndex] = None

    @property
    def first_alarm(self) -> Optional[int]:
        return int(self.alarms[0]) if self.alarms.size else None

    @property
    def run_length(self) -> Optional[int]:
        first = self.first_alarm
        return None if first is None else first + 1


def sr_run(
    lam: np.ndarray,
    threshold: float,
    reset: bool = False,
    suppress: int = 0,
    times: Optional[pd.DatetimeIndex] = None,
    detector: str = "sr",
) -> AlarmTrace:
    """SR recursion from R_0 = 0; alarm when R_t >= threshold."""
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    if np.any(~(lam > 0.0)):
        raise ValueError("likelihood ratios must be positive")
    if not threshold > 0.0:
        raise ValueError("threshold must be positive")
    path, flags = kernels.sr_alarm_path(
        lam, float(threshold), bool(reset), int(suppress)
    )
    return AlarmTrace(path, float(threshold), np.flatnonzero(flags), detector, times)


def _cusum_increments(score: np.ndarray, k: float, direction: str) -> np.ndarray:
    if direction not in ("drought", "flood"):
        raise ValueError("direction must be 'drought' or 'flood'")
    score = np.asarray(score, dtype=np.float64)
    signed = -score if direction == "drought" else score
    return np.ascontiguousarray(np.where(np.isfinite(signed), signed - k, 0.0))


def cusum_run(
    score: np.ndarray,
    k: float,
    threshold: float,
    direction: str = "drought",
    reset: bool = False,
    suppress: int = 0,
    times: Optional[pd.DatetimeIndex] = None,
) -> AlarmTrace:
    """One-sided CUSUM S_t = max(0, S_{t-1} -score_t - k) (drought) or +score_t (flood).

    Undefined scores (NaN) leave the statistic unchanged.
    """
    if k < 0 or not threshold > 0:
        raise ValueError("need k >= 0 and threshold > 0")
    path, flags = kernels.cusum_alarm_path(
        _cusum_increments(score, k, direction),
        float(threshold),
        bool(reset),
        int(suppress),
    )
    return AlarmTrace(path, float(threshold), np.flatnonzero(flags), "cusum", times)


def threshold_run(
    precip: np.ndarray,
    window: int,
    threshold: float,
    direction: str = "deficit",
    suppress: int = 0,
    times: Optional[pd.DatetimeIndex] = None,
) -> AlarmTrace:
    """
    Alarm at the start of each episode of the trailing accumulation.

    Episodes are steps below the threshold (deficit) or above it (exceedance).
    """
    return level_run(rolling_sum(precip, window), threshold, direction, suppress, times)


def level_run(
    sums: np.ndarray,
    threshold: float,
    direction: str = "deficit",
    suppress: int = 0,
    times: Optional[pd.DatetimeIndex] = None,
) -> AlarmTrace:
    """Episode alarms on a precomputed accumulation path; NaN steps never alarm."""
    if direction not in ("deficit", "exceedance"):
        raise ValueError("direction must be 'deficit' or 'exceedance'")
    sums = np.asarray(sums, dtype=np.float64)
    defined = np.isfinite(sums)
    if direction == "deficit":
        condition = defined & (sums < threshold)
    else:
        condition = defined & (sums > threshold)
    flags = kernels.episode_alarm_flags(np.ascontiguousarray(condition), int(suppress))
    return AlarmTrace(sums, float(threshold), np.flatnonzero(flags), direction, times)


def deficit_threshold(
    precip: np.ndarray,
    window: int,
    calibration_mask: Optional[np.ndarray] = None,
    percentile: float = 10.0,
) -> float:
    """Climatological percentile of the trailing accumulation over calibration steps."""
    sums = rolling_sum(precip, window)
    keep = np.isfinite(sums)
    if calibration_mask is not None:
        keep &= np.asarray(calibration_mask, dtype=bool)
    if not np.any(keep):
        raise CalibrationError(
            "no complete accumulation window in the calibration period"
        )
    return float(np.percentile(sums[keep], percentile))


class NullSource(Protocol):
    """Seedable source of no-change values (defects, SPI or accumulations)."""

    def draw(
        self, rng: np.random.Generator, n: int
    ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        ...


class NullStatistic(Protocol):
    """Detector statistic that can be continued across null segments."""

    name: str
    start: float

    def extend(
        self, values: np.ndarray, months: Optional[np.ndarray], state: float
    ) -> Tuple[np.ndarray, float]:
        ...


@dataclass
class BlockBootstrapSource:
    """Circular blocks of held-out climatology values, months carried along."""

    values: np.ndarray
    months: Optional[np.ndarray] = None
    block_len: int = 90

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size == 0 or not np.all(np.isfinite(self.values)):
            raise CalibrationError("bootstrap source needs finite values")
        if self.block_len < 1:
            raise ValueError("block_len must be >= 1")

    def draw(
        self, rng: np.random.Generator, n: int
    ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        size = self.values.size
        n_blocks = -(-n // self.block_len)
        starts = rng.integers(0, size, size=n_blocks)
        offsets = starts[:, None] + np.arange(self.block_len)[None, :]
        index = (offsets % size).reshape(-1)[:n]
        months = None if self.months is None else np.asarray(self.months)[index]
        return self.values[index], months


@dataclass
class IidSource:
    """Values from ``sampler(rng, n)``.

    The sampler must be a module-level function so worker processes can load it.
    """

    sampler: Callable[[np.random.Generator, int], np.ndarray]

    def draw(
        self, rng: np.random.Generator, n: int
    ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        return np.asarray(self.sampler(rng, n), dtype=np.float64), None


@dataclass
class SrStatistic:
    calib: NullCalibration
    name: str = "sr"
    start: float = 0.0

    def extend(
        self, values: np.ndarray, months: Optional[np.ndarray], state: float
    ) -> Tuple[np.ndarray, float]:
        lam = likelihood_ratio(values, self.calib, months)
        path = kernels.sr_path(np.ascontiguousarray(lam), state)
        return path, float(path[-1])


@dataclass
class CusumStatistic:
    k: float = 0.5
    direction: str = "drought"
    name: str = "cusum"
    start: float = 0.0

    def extend(
        self, values: np.ndarray, months: Optional[np.ndarray], state: float
    ) -> Tuple[np.ndarray, float]:
        increments = _cusum_increments(values, self.k, self.direction)
        path = kernels.cusum_path(increments, state)
        return path, float(path[-1])


@dataclass
class LevelStatistic:
    """Signed raw level: deficit alarms on -x, exceedance alarms on +x."""

    direction: str = "deficit"
    name: str = "deficit"
    start: float = 0.0

    def extend(
        self, values: np.ndarray, months: Optional[np.ndarray], state: float
    ) -> Tuple[np.ndarray, float]:
        signed = -values if self.direction == "deficit" else values
        return np.where(np.isfinite(signed), signed, -np.inf), state


SegmentJob = Tuple[NullSource, NullStatistic, int, int, float, int, int]


def _simulate_segment(job: SegmentJob) -> Tuple[np.ndarray, bool]:
    source, statistic, seed, index, cap, segment_len, max_len = job
    rng = np.random.default_rng([seed, index])
    state = statistic.start
    pieces: List[np.ndarray] = []
    best = -np.inf
    total = 0
    while total < max_len:
        values, months = source.draw(rng, segment_len)
        path, state = statistic.extend(values, months, state)
        runmax = np.maximum.accumulate(np.maximum(path, best))
        hit = np.searchsorted(runmax, cap, side="left")
        if hit < runmax.size:
            pieces.append(runmax[: hit + 1])
            return np.concatenate(pieces), False
        pieces.append(runmax)
        best = runmax[-1]
        total += runmax.size
    return np.concatenate(pieces)[:max_len], True


def _simulate_chunk(jobs: List[SegmentJob]) -> List[Tuple[np.ndarray, bool]]:
    return [_simulate_segment(job) for job in jobs]


@dataclass
class NullPaths:
    """Running maxima of null statistic paths, kept up to the first pass of ``cap``."""

    runmax: List[np.ndarray]
    cap: float
    name: str = "sr"

    @property
    def n(self) -> int:
        return len(self.runmax)

    def first_passages(
        self, b: float, subset: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Run length to the first statistic >= b per path, and a censoring flag."""
        paths = self.runmax if subset is None else [self.runmax[i] for i in subset]
        fpt = np.empty(len(paths))
        censored = np.zeros(len(paths), dtype=bool)
        for i, runmax in enumerate(paths):
            hit = int(np.searchsorted(runmax, b, side="left"))
            if hit < runmax.size:
                fpt[i] = hit + 1
            else:
                fpt[i] = runmax.size
                censored[i] = True
        return fpt, censored

    def arl(self, b: float, subset: Optional[np.ndarray] = None) -> float:
        return float(np.mean(self.first_passages(b, subset)[0]))

    def passage_matrix(self, grid: np.ndarray) -> np.ndarray:
        """First-passage times of every path at every grid threshold (n x G)."""
        grid = np.asarray(grid, dtype=np.float64)
        out = np.empty((self.n, grid.size))
        for i, runmax in enumerate(self.runmax):
            hit = np.searchsorted(runmax, grid, side="left")
            out[i] = np.where(hit < runmax.size, hit + 1, runmax.size)
        return out


def simulate_null_paths(
    source: NullSource,
    statistic: NullStatistic,
    n_segments: int,
    seed: int,
    cap: float,
    segment_len: int,
    max_len: int,
    workers: int = 1,
) -> NullPaths:
    """
    Simulate null statistic paths, extending each segment until it passes ``cap``.

    Segment i draws from ``default_rng([seed, i])``; results are gathered in segment
    order, so the outcome does not depend on ``workers``.
    """
    jobs: List[SegmentJob] = [
        (source, statistic, seed, i, cap, segment_len, max_len)
        for i in range(n_segments)
    ]
    if workers <= 1:
        results = _simulate_chunk(jobs)
    else:
        size = -(-len(jobs) // workers)
        chunks = [jobs[i : i + size] for i in range(0, len(jobs), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [
                item for chunk in pool.map(_simulate_chunk, chunks) for item in chunk
            ]
    censored = sum(flag for _, flag in results)
    if censored and np.isfinite(cap):
        logger.warning(
            f"{censored}/{n_segments} null segments censored at {max_len} steps "
            f"before passing {cap:.6g}"
        )
    return NullPaths(
        runmax=[path for path, _ in results], cap=cap, name=statistic.name
    )


@dataclass
class SrThreshold:
    """Calibrated threshold with its percentile-bootstrap 95% interval.

    ``converged`` is False when the empirical ARL0 at ``B_star`` misses the target
    by more than ARL0_TOLERANCE (discrete run lengths or too few null paths).
    """

    B_star: float
    target_arl0: float
    ci95: Tuple[float, float]
    n_boot: int
    seed: int = 0
    achieved_arl0: float = float("nan")
    censored_fraction: float = 0.0
    detector: str = "sr"
    converged: bool = True

    def __post_init__(self) -> None:
        lo, hi = self.ci95
        self.ci95 = (min(lo, self.B_star), max(hi, self.B_star))
        if self.detector in ("sr", "cusum") and not self.B_star > 0.0:
            raise CalibrationError(
                f"{self.detector} threshold must be positive, got {self.B_star}"
            )


def _bisect(
    paths: NullPaths,
    target: float,
    lo: float,
    hi: float,
    subset: Optional[np.ndarray] = None,
) -> float:
    for _ in range(200):
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if paths.arl(mid, subset) <= target:
            lo = mid
        else:
            hi = mid
    return lo


def _largest_admissible(
    arl_grid: np.ndarray, grid: np.ndarray, target: float, fallback: float
) -> float:
    ok = np.flatnonzero(arl_grid <= target)
    return float(grid[ok[-1]]) if ok.size else fallback


def calibrate_paths(
    source: NullSource,
    statistic: NullStatistic,
    target_arl0: float,
    n_boot: int = 1000,
    seed: int = 0,
    n_ci: int = 200,
    cap: Optional[float] = None,
    segment_len: Optional[int] = None,
    max_len: Optional[int] = None,
    workers: int = 1,
    max_censored: float = 0.01,
) -> Tuple[SrThreshold, NullPaths]:
    """
    Largest threshold whose Monte-Carlo ARL0 does not exceed ``target_arl0``.

    The threshold is located by bisection on common null paths; its interval is
    the 2.5/97.5 percentiles over ``n_ci`` resamples of the segments.
    """
    if n_boot < 100:
        raise CalibrationError("n_boot must be >= 100")
    if target_arl0 < 1:
        raise CalibrationError("target ARL0 must be >= 1")
    segment_len = segment_len or int(max(100, 2 * target_arl0))
    max_len = max_len or int(max(1000, 50 * target_arl0))
    cap = 2.0 * target_arl0 if cap is None else float(cap)

    for attempt in range(8):
        paths = simulate_null_paths(
            source, statistic, n_boot, seed, cap, segment_len, max_len, workers
        )
        if paths.arl(cap) > target_arl0:
            break
        logger.debug(f"ARL0 at cap {cap:.6g} below target; widening")
        cap = cap * 4.0 if cap > 0 else 1.0
    else:
        raise CalibrationError(
            "null paths never exceed the target ARL0; segments too short"
        )

    lo = float(min(runmax[0] for runmax in paths.runmax))
    lo = min(lo, 0.0) if statistic.name in ("sr", "cusum") else lo
    if paths.arl(lo) > target_arl0:
        raise CalibrationError(
            "target ARL0 is below the smallest attainable run length"
        )
    if np.isfinite(cap):
        hi = cap
    else:
        hi = float(max(runmax[-1] for runmax in paths.runmax)) + 1.0
    b_star = _bisect(paths, target_arl0, lo, hi)

    fpt, censored = paths.first_passages(b_star)
    censored_fraction = float(np.mean(censored))
    if censored_fraction > max_censored:
        raise CalibrationError(
            f"{censored_fraction:.1%} of null segments censored at the threshold; "
            "ARL0 estimate unreliable"
        )
    achieved = float(np.mean(fpt))
    converged = abs(achieved - target_arl0) / target_arl0 <= ARL0_TOLERANCE
    if not converged:
        logger.warning(
            f"Calibrated ARL0 {achieved:.1f} deviates from target "
            f"{target_arl0:.1f} by > 2%"
        )

    span = max(abs(b_star), 1e-12)
    sweep = np.linspace(b_star - 2.0 * span, b_star + 2.0 * span, 801)
    grid = np.unique(np.concatenate([sweep, [b_star]]))
    matrix = paths.passage_matrix(grid)
    rng = np.random.default_rng([seed, n_boot, 1])
    picks = rng.integers(0, paths.n, size=(n_ci, paths.n))
    boot = [
        _largest_admissible(matrix[row].mean(axis=0), grid, target_arl0, grid[0])
        for row in picks
    ]
    ci = (float(np.percentile(boot, 2.5)), float(np.percentile(boot, 97.5)))

    threshold = SrThreshold(
        B_star=float(b_star),
        target_arl0=float(target_arl0),
        ci95=ci,
        n_boot=n_boot,
        seed=seed,
        achieved_arl0=achieved,
        censored_fraction=censored_fraction,
        detector=statistic.name,
        converged=converged,
    )
    lo_ci, hi_ci = threshold.ci95
    logger.info(
        f"Calibrated {statistic.name} threshold {b_star:.6g} for ARL0 "
        f"{target_arl0:g} (empirical {achieved:.1f}, "
        f"CI [{lo_ci:.6g}, {hi_ci:.6g}])"
    )
    return threshold, paths


def calibrate_threshold(
    null_generator: NullSource,
    calib: NullCalibration,
    target_arl0: float,
    n_boot: int = 1000,
    seed: int = 0,
    n_ci: int = 200,
    segment_len: Optional[int] = None,
    max_len: Optional[int] = None,
    workers: int = 1,
    max_censored: float = 0.01,
) -> SrThreshold:
    """SR threshold B* matching ``target_arl0`` on bootstrapped null defect segments."""
    threshold, _ = calibrate_paths(
        null_generator,
        SrStatistic(calib),
        target_arl0,
        n_boot=n_boot,
        seed=seed,
        n_ci=n_ci,
        segment_len=segment_len,
        max_len=max_len,
        workers=workers,
        max_censored=max_censored,
    )
    return threshold


def calibrate_cusum_threshold(
    null_scores: NullSource,
    k: float,
    target_arl0: float,
    direction: str = "drought",
    n_boot: int = 1000,
    seed: int = 0,
    **kwargs: Any,
) -> SrThreshold:
    """CUSUM threshold matched to ``target_arl0`` by the same Monte-Carlo search."""
    threshold, _ = calibrate_paths(
        null_scores,
        CusumStatistic(k=k, direction=direction),
        target_arl0,
        n_boot=n_boot,
        seed=seed,
        **kwargs,
    )
    return threshold


def calibrate_level_threshold(
    null_levels: NullSource,
    target_arl0: float,
    direction: str = "deficit",
    n_boot: int = 1000,
    seed: int = 0,
    **kwargs: Any,
) -> SrThreshold:
    """Accumulation threshold matched to ``target_arl0``, in accumulation units."""
    statistic = LevelStatistic(direction=direction, name=direction)
    values = getattr(null_levels, "values", None)
    cap = np.inf
    if values is not None:
        cap = float(np.max(-values if direction == "deficit" else values))
    threshold, _ = calibrate_paths(
        null_levels,
        statistic,
        target_arl0,
        n_boot=n_boot,
        seed=seed,
        cap=cap,
        **kwargs,
    )
    if direction == "deficit":
        lo, hi = threshold.ci95
        threshold.B_star = -threshold.B_star
        threshold.ci95 = (-hi, -lo)
    return threshold


def arl_curve(
    paths: NullPaths, b_grid: Sequence[float], n_ci: int = 200, seed: int = 0
) -> pd.DataFrame:
    """Empirical ARL0 against threshold: median and 95% band over segment resamples."""
    grid = np.asarray(b_grid, dtype=np.float64)
    matrix = paths.passage_matrix(grid)
    rng = np.random.default_rng([seed, 2])
    picks = rng.integers(0, paths.n, size=(n_ci, paths.n))
    boot = np.stack([matrix[row].mean(axis=0) for row in picks])
    return pd.DataFrame(
        {
            "B": grid,
            "arl0_median": np.median(boot, axis=0),
            "arl0_lo": np.percentile(boot, 2.5, axis=0),
            "arl0_hi": np.percentile(boot, 97.5, axis=0),
        }
    )


@dataclass
class DetectorReport:
    detector: str
    arl0: float
    arl0_censored: bool
    detection_rate: float
    mean_lead: float
    far: float
    miss_rate: float
    n_events: int
    n_detected: int = 0
    leads: List[int] = field(default_factory=list, repr=False)


def evaluate_detector(
    event_traces: Sequence[AlarmTrace],
    onsets: Sequence[int],
    null_traces: Sequence[AlarmTrace],
    detection_window: int,
    detector: Optional[str] = None,
) -> DetectorReport:
    """
    Score a detector on labelled event segments and disjoint null segments.

    An event is detected by its earliest alarm within +/- ``detection_window`` of the
    onset; lead = onset - alarm (positive = early). ARL0 is the mean first passage
    on null segments, with alarm-free segments counted at their length (censored).
    FAR = null-segment alarms / all alarms.
    """
    if len(onsets) == 0:
        raise EventFreeError("no reference events to evaluate against")
    if len(event_traces) != len(onsets):
        raise ValueError("one trace per reference onset is required")

    leads: List[int] = []
    event_alarms = 0
    for trace, onset in zip(event_traces, onsets):
        event_alarms += trace.alarms.size
        near = trace.alarms[np.abs(trace.alarms - onset) <= detection_window]
        if near.size:
            leads.append(int(onset - near.min()))

    run_lengths: List[int] = []
    censored, null_alarms = False, 0
    for trace in null_traces:
        null_alarms += trace.alarms.size
        if trace.alarms.size:
            run_lengths.append(int(trace.alarms[0]) + 1)
        else:
            run_lengths.append(int(trace.statistic.size))
            censored = True

    total_alarms = event_alarms + null_alarms
    detection = len(leads) / len(onsets)
    name = detector or (event_traces[0].detector if event_traces else "detector")
    return DetectorReport(
        detector=name,
        arl0=float(np.mean(run_lengths)) if run_lengths else UNDEFINED,
        arl0_censored=censored,
        detection_rate=detection,
        mean_lead=float(np.mean(leads)) if leads else UNDEFINED,
        far=null_alarms / total_alarms if total_alarms else UNDEFINED,
        miss_rate=1.0 - detection,
        n_events=len(onsets),
        n_detected=len(leads),
        leads=leads,
    )


def ablate_inputs(
    inputs: np.ndarray, layout: InputLayout, channels: Sequence[str]
) -> np.ndarray:
    """Value columns of ``channels`` set to their training mean (zero once scaled)."""
    out = np.array(inputs, dtype=np.float64, copy=True)
    for channel in channels:
        out[:, layout.value_columns(channel)] = 0.0
    return out


def _peak_defect(
    model: RmModel, inputs: np.ndarray, window: Optional[slice]
) -> float:
    r = defect_series(forward_pass(inputs, model).trajectory, model).r
    r = r if window is None else r[window]
    return float(np.max(r)) if r.size else 0.0


def ablate_channel(
    model: RmModel,
    inputs: np.ndarray,
    layout: InputLayout,
    channel: str,
    window: Optional[slice] = None,
) -> float:
    """Fractional drop of the peak defect in ``window`` when ``channel`` is ablated."""
    base = _peak_defect(model, inputs, window)
    ablated = _peak_defect(model, ablate_inputs(inputs, layout, [channel]), window)
    if base <= 0.0:
        return 0.0
    return (base - ablated) / base


def channel_attribution(
    model: RmModel,
    inputs: np.ndarray,
    layout: InputLayout,
    window: Optional[slice] = None,
) -> List[Tuple[str, float]]:
    """Leave-one-channel-out reductions, largest first (ties in layout order)."""
    scores = [
        (channel, ablate_channel(model, inputs, layout, channel, window))
        for channel in layout.channels
    ]
    return sorted(scores, key=lambda item: -item[1])


def input_weight_names(model: RmModel) -> List[str]:
    """Parameters that multiply the input vector."""
    gates = GATES.get(model.cell_kind)
    return ["W_x"] if gates is None else [f"W_{gate}" for gate in gates]


def dominant_channel_model(
    model: RmModel, layout: InputLayout, channel: str
) -> RmModel:
    """Copy of ``model`` that reads only ``channel``; other value columns are cut."""
    keep = set(layout.value_columns(channel))
    dropped = [
        j
        for c in layout.channels
        if c != channel
        for j in layout.value_columns(c)
        if j not in keep
    ]
    out = model.copy()
    for name in input_weight_names(out):
        out.params[name][:, dropped] = 0.0
    return out


@dataclass
class MonitorStep:
    defect: float
    statistic: float
    alarm: bool


class OnlineSrMonitor:
    """Streaming SR alarm: one input row at a time, one step of defect latency."""

    def __init__(
        self,
        model: RmModel,
        calib: NullCalibration,
        threshold: float,
        reset: bool = True,
        suppress: int = 0,
    ) -> None:
        self.model = model
        self.calib = calib
        self.threshold = float(threshold)
        self.reset = reset
        self.suppress = int(suppress)
        self._h = np.zeros(model.hidden_dim)
        self._c: Optional[np.ndarray] = None
        self._started = False
        self._R = 0.0
        self._hold = 0
        self._alarmed = False

    @property
    def statistic(self) -> float:
        return self._R

    def update(
        self, x_t: np.ndarray, month: Optional[int] = None
    ) -> Optional[MonitorStep]:
        """Advance one step; returns None until two hidden states exist."""
        h, c = cell_step(x_t, self._h, self.model, self._c)
        step: Optional[MonitorStep] = None
        if self._started:
            defect = float(np.linalg.norm(self._h - projector_apply(h, self.model)))
            months = None if month is None else np.array([month])
            lam = float(likelihood_ratio(np.array([defect]), self.calib, months)[0])
            self._R = (1.0 + self._R) * lam
            alarm = False
            if self._hold > 0:
                self._hold -= 1
            elif self._R >= self.threshold and not (self._alarmed and not self.reset):
                alarm = True
                self._alarmed = True
            step = MonitorStep(defect=defect, statistic=self._R, alarm=alarm)
            if alarm and self.reset:
                self._R = 0.0
                self._hold = self.suppress
        self._h, self._c = h, c
        self._started = True
        return step


def stream_defects(model: RmModel, inputs: np.ndarray) -> Iterator[float]:
    """Online defects r_1, r_2, ... computed one input row at a time."""
    h = np.zeros(model.hidden_dim)
    c: Optional[np.ndarray] = None
    previous: Optional[np.ndarray] = None
    for x_t in np.asarray(inputs, dtype=np.float64):
        h, c = cell_step(x_t, h, model, c)
        if previous is not None:
            yield float(np.linalg.norm(previous - projector_apply(h, model)))
        previous = h
