"""
Synthetic hydromet series with known climatology and planted change points.

Occurrence follows a two-state Markov chain per site whose wet probability is
seasonally modulated; wet amounts are lognormal; sites are coupled through a
Gaussian copula with exponential spatial decorrelation. Covariates T, q and
Omega respond to season and rain state.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from .config import ConfigError
from .timeseries import MeteoSeries, Site, great_circle_km
from .verification import rolling_sum

logger = logging.getLogger(__name__)

CHANNELS = ["P", "T", "q", "Omega"]
UNITS = {"P": "mm", "T": "degC", "q": "g/kg", "Omega": "1e-5 s-1"}
KM_PER_DEGREE = 111.195
MANIFEST_FORMAT = "coherence-warning-manifest/1"


@dataclass(frozen=True)
class SynthConfig:
    n_sites: int = 5
    steps: int = 5000
    step_unit: Literal["hour", "day"] = "day"
    seasonal_amplitude: float = 0.3
    p_wet: float = 0.3
    persistence: float = 0.7
    wet_mu: float = 1.0
    wet_sigma: float = 1.0
    decorrelation_km: float = 20.0
    spread_km: float = 10.0
    center_lat: float = 25.0
    center_lon: float = 121.5
    start: str = "2000-01-01T00:00:00Z"
    seed: int = 0
    # covariate coupling
    t_mean: float = 20.0
    t_seasonal: float = 8.0
    t_wet_shift: float = -2.0
    q_mean: float = 10.0
    q_seasonal: float = 4.0
    q_wet_shift: float = 2.0
    omega_wet_shift: float = 1.5
    covariate_noise: float = 1.0

    def __post_init__(self) -> None:
        if self.n_sites < 1 or self.steps < 2:
            raise ConfigError("synth needs n_sites >= 1 and steps >= 2")
        if self.step_unit not in ("hour", "day"):
            raise ConfigError(
                f"step_unit must be 'hour' or 'day', got {self.step_unit!r}"
            )
        if not 0.0 <= self.p_wet < 1.0:
            raise ConfigError(f"p_wet must lie in [0, 1), got {self.p_wet}")
        if not 0.0 <= self.persistence < 1.0:
            raise ConfigError(f"persistence must lie in [0, 1), got {self.persistence}")
        if not self.wet_sigma > 0.0:
            raise ConfigError("wet_sigma must be positive")
        if not 0.0 <= self.seasonal_amplitude <= 1.0:
            raise ConfigError("seasonal_amplitude must lie in [0, 1]")
        if not self.decorrelation_km > 0.0 or self.spread_km < 0.0:
            raise ConfigError(
                "decorrelation_km must be positive and spread_km non-negative"
            )

    @property
    def steps_per_year(self) -> float:
        return 365.25 * (24.0 if self.step_unit == "hour" else 1.0)


@dataclass(frozen=True)
class ChangeSpec:
    """
    A planted change.

    Droughts thin and damp wet values from the onset; floods ramp the precursor
    channels up before a precipitation burst.
    """

    kind: Literal["drought", "flood"]
    onset: int
    wet_multiplier: float = 0.2
    amount_multiplier: float = 0.5
    t_shift: float = 0.0
    q_shift: float = 0.0
    duration: int = 3
    intensity: float = 1.2
    threshold: float = 50.0
    window: int = 3
    lead: int = 4
    precursor_scale: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("drought", "flood"):
            raise ConfigError(
                f"change kind must be 'drought' or 'flood', got {self.kind!r}"
            )
        if self.onset < 0:
            raise ConfigError("onset must be a non-negative step index")
        multipliers = (self.wet_multiplier, self.amount_multiplier, self.intensity)
        if not all(m > 0 for m in multipliers):
            raise ConfigError("change multipliers must be positive")
        if self.duration < 1 or self.window < 1 or self.lead < 0:
            raise ConfigError("need duration >= 1, window >= 1 and lead >= 0")

    def check_within(self, n_times: int) -> None:
        first = self.onset - (self.lead if self.kind == "flood" else 0)
        last = self.onset + (self.duration if self.kind == "flood" else 1)
        if first < 0 or last > n_times:
            raise ConfigError(
                f"{self.kind} onset {self.onset} does not fit in a series "
                f"of {n_times} steps"
            )


def site_layout(cfg: SynthConfig) -> List[Site]:
    """Target ``S000`` at the centre, the rest evenly on a ring of ``spread_km``."""
    sites = [Site("S000", cfg.center_lat, cfg.center_lon)]
    ring = cfg.n_sites - 1
    km_per_lon = KM_PER_DEGREE * math.cos(math.radians(cfg.center_lat))
    for k in range(ring):
        theta = 2.0 * math.pi * k / ring
        dlat = cfg.spread_km * math.cos(theta) / KM_PER_DEGREE
        dlon = cfg.spread_km * math.sin(theta) / km_per_lon
        sites.append(
            Site(
                f"S{k + 1:03d}",
                round(cfg.center_lat + dlat, 6),
                round(cfg.center_lon + dlon, 6),
            )
        )
    return sites


def _copula_factor(sites: Sequence[Site], decorrelation_km: float) -> np.ndarray:
    n = len(sites)
    distance = np.array([[great_circle_km(a, b) for b in sites] for a in sites])
    corr = np.exp(-distance / decorrelation_km)
    return np.linalg.cholesky(corr + 1e-10 * np.eye(n))


def gen_climatology(cfg: SynthConfig) -> MeteoSeries:
    """Deterministic synthetic climatology for ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    sites = site_layout(cfg)
    n, T = len(sites), cfg.steps
    factor = _copula_factor(sites, cfg.decorrelation_km)

    phase = 2.0 * math.pi * np.arange(T) / cfg.steps_per_year
    season = np.sin(phase)
    p_t = np.clip(cfg.p_wet * (1.0 + cfg.seasonal_amplitude * season), 0.0, 1.0)
    rho = cfg.persistence

    occurrence_u = stats.norm.cdf(rng.standard_normal((T, n)) @ factor.T)
    amount_z = rng.standard_normal((T, n)) @ factor.T
    noise = rng.standard_normal((3, T, n)) @ factor.T

    wet = np.zeros((T, n), dtype=bool)
    previous = occurrence_u[0] < p_t[0]
    wet[0] = previous
    for t in range(1, T):
        prob = np.where(previous, p_t[t] + rho * (1.0 - p_t[t]), p_t[t] * (1.0 - rho))
        previous = occurrence_u[t] < prob
        wet[t] = previous

    precip = np.where(wet, np.exp(cfg.wet_mu + cfg.wet_sigma * amount_z), 0.0)
    wet_f = wet.astype(np.float64)
    temp = (
        cfg.t_mean
        + cfg.t_seasonal * season[:, None]
        + cfg.t_wet_shift * wet_f
        + cfg.covariate_noise * noise[0]
    )
    humidity = (
        cfg.q_mean
        + cfg.q_seasonal * season[:, None]
        + cfg.q_wet_shift * wet_f
        + cfg.covariate_noise * noise[1]
    )
    omega = cfg.omega_wet_shift * wet_f + cfg.covariate_noise * noise[2]

    values = np.stack([precip, temp, humidity, omega], axis=-1).transpose(1, 0, 2)
    freq = "h" if cfg.step_unit == "hour" else "D"
    times = pd.date_range(pd.Timestamp(cfg.start), periods=T, freq=freq)
    if times.tz is None:
        times = times.tz_localize("UTC")
    logger.debug(
        f"Generated {T} {cfg.step_unit} steps at {n} sites, "
        f"wet fraction {wet.mean():.3f}"
    )
    return MeteoSeries(
        sites=sites,
        times=times,
        channels=list(CHANNELS),
        values=np.ascontiguousarray(values),
        mask=np.ones(values.shape, dtype=bool),
        units=dict(UNITS),
    )


def basin_precip(series: MeteoSeries) -> np.ndarray:
    """Site-averaged precipitation."""
    return series.values[:, :, series.channel_index("P")].mean(axis=0)


def _inject_drought(series: MeteoSeries, spec: ChangeSpec) -> Tuple[MeteoSeries, int]:
    values = series.values.copy()
    p = series.channel_index("P")
    rng = np.random.default_rng([spec.seed, spec.onset])
    post = values[:, spec.onset :, p]
    keep = rng.random(post.shape) < spec.wet_multiplier
    values[:, spec.onset :, p] = np.where(keep, post * spec.amount_multiplier, 0.0)
    if spec.t_shift != 0.0 and "T" in series.channels:
        values[:, spec.onset :, series.channel_index("T")] += spec.t_shift
    if spec.q_shift != 0.0 and "q" in series.channels:
        values[:, spec.onset :, series.channel_index("q")] += spec.q_shift
    return series.with_values(values), spec.onset


def _inject_flood(series: MeteoSeries, spec: ChangeSpec) -> Tuple[MeteoSeries, int]:
    values = series.values.copy()
    ramp = spec.precursor_scale * np.arange(1, spec.lead + 1) / max(spec.lead, 1)
    start = spec.onset - spec.lead
    for name in ("Omega", "q"):
        if name in series.channels and spec.lead > 0:
            values[:, start : spec.onset, series.channel_index(name)] += ramp[None, :]
    burst = spec.intensity * spec.threshold / spec.duration
    precip = series.channel_index("P")
    values[:, spec.onset : spec.onset + spec.duration, precip] = burst
    injected = series.with_values(values)

    sums = rolling_sum(basin_precip(injected), spec.window)[spec.onset :]
    after = np.flatnonzero(np.isfinite(sums) & (sums > spec.threshold))
    if after.size == 0:
        raise ConfigError(
            "flood burst does not exceed the onset threshold; "
            "raise intensity or duration"
        )
    return injected, spec.onset + int(after[0])


def inject(series: MeteoSeries, spec: ChangeSpec) -> Tuple[MeteoSeries, int]:
    """
    Plant ``spec`` in ``series``; steps before the change window are left untouched.

    Drought: from ``onset`` each wet value is kept with probability ``wet_multiplier``
    and scaled by ``amount_multiplier``. Flood: Omega and q ramp up over the ``lead``
    steps before ``onset``, then every site receives a burst summing to
    ``intensity * threshold`` over ``duration`` steps.

    Returns:
        (changed series, true onset); for floods the true onset is the first step at
        or after ``onset`` where the basin ``window``-sum exceeds ``threshold``
    """
    spec.check_within(series.n_times)
    if "P" not in series.channels:
        raise ConfigError("injection needs a precipitation channel 'P'")
    if spec.kind == "drought":
        out = _inject_drought(series, spec)
    else:
        out = _inject_flood(series, spec)
    logger.debug(f"Injected {spec.kind} at step {spec.onset}, true onset {out[1]}")
    return out


def write_manifest(
    path: Union[str, Path],
    cfg: Optional[SynthConfig],
    specs: Sequence[ChangeSpec],
    onsets: Sequence[int],
    times: Optional[pd.DatetimeIndex] = None,
) -> None:
    """Sidecar JSON with the generator config and each planted change's true onset."""
    if len(specs) != len(onsets):
        raise ValueError("one true onset per change spec is required")
    changes = []
    for spec, onset in zip(specs, onsets):
        entry = asdict(spec)
        entry["true_onset"] = int(onset)
        if times is not None:
            entry["true_onset_time"] = times[int(onset)].strftime("%Y-%m-%dT%H:%M:%SZ")
        changes.append(entry)
    document = {
        "format": MANIFEST_FORMAT,
        "config": asdict(cfg) if cfg is not None else None,
        "changes": changes,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote manifest with {len(changes)} change(s) to {path}")


def read_manifest(path: Union[str, Path]) -> Tuple[List[ChangeSpec], List[int]]:
    """Change specs and true onsets from a sidecar written by :func:`write_manifest`."""
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    if document.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"Unsupported manifest format: {document.get('format')!r}")
    specs, onsets = [], []
    for entry in document["changes"]:
        entry = dict(entry)
        onsets.append(int(entry.pop("true_onset")))
        entry.pop("true_onset_time", None)
        specs.append(ChangeSpec(**entry))
    return specs, onsets


def synthesize(
    cfg: SynthConfig, specs: Sequence[ChangeSpec] = ()
) -> Tuple[MeteoSeries, List[int]]:
    """Climatology with every spec applied in order."""
    series = gen_climatology(cfg)
    onsets = []
    for spec in specs:
        series, onset = inject(series, spec)
        onsets.append(onset)
    return series, onsets
