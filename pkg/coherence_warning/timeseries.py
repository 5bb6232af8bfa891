"""Meteorological time series: data model, CSV ingestion, neighbourhoods, resampling."""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import ConfigError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
PRECIP_CHANNEL = "P"
CSV_KEY_COLUMNS = ["time", "site_id", "lat", "lon"]

DEFAULT_UNITS = {
    "P": "mm",
    "T": "degC",
    "T2m": "degC",
    "q": "g/kg",
    "Omega": "1e-5 s-1",
    "theta_sm": "m3/m3",
    "u10": "m/s",
    "v10": "m/s",
}


class DataError(Exception):
    """Input data does not satisfy the series contract."""

    pass


class ParseError(DataError):
    """Malformed CSV content."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    """Structurally valid file whose content violates the series schema."""

    pass


class UnknownSiteError(DataError, LookupError):
    """Site id not present in the series."""

    pass


class UnknownChannelError(DataError, LookupError):
    """Channel name not present in the series."""

    pass


class DegenerateChannelError(DataError):
    """Channel cannot be standardized (zero spread or too few observations)."""

    pass


@dataclass(frozen=True)
class Site:
    """A station or grid cell."""

    id: str
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise SchemaError(f"Site {self.id}: latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise SchemaError(
                f"Site {self.id}: longitude {self.lon} outside [-180, 180]"
            )


@dataclass
class MeteoSeries:
    """Multi-site, multi-channel observations on a fixed time grid.

    ``values`` has shape (n_sites, n_times, n_channels). Missing entries are
    flagged ``False`` in ``mask`` and hold NaN in ``values``; they are never
    imputed. ``source_index`` records, for resampled series, the original time
    index each output step was copied from.
    """

    sites: List[Site]
    times: pd.DatetimeIndex
    channels: List[str]
    values: np.ndarray
    mask: np.ndarray
    units: Dict[str, str] = field(default_factory=dict)
    source_index: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self._validate()
        self.values = np.where(self.mask, self.values, np.nan)
        for channel in self.channels:
            self.units.setdefault(channel, DEFAULT_UNITS.get(channel, ""))

    def _validate(self) -> None:
        expected = (len(self.sites), len(self.times), len(self.channels))
        if self.values.shape != expected:
            raise SchemaError(
                f"values shape {self.values.shape} does not match "
                f"(sites, times, channels) = {expected}"
            )
        if self.mask.shape != expected:
            raise SchemaError(f"mask shape {self.mask.shape} does not match {expected}")

        ids = [site.id for site in self.sites]
        if len(set(ids)) != len(ids):
            raise SchemaError("site ids must be unique within a series")
        if len(set(self.channels)) != len(self.channels):
            raise SchemaError("channel names must be unique")

        if len(self.times) >= 2:
            diffs = np.diff(self.times.asi8)
            if np.any(diffs <= 0):
                raise SchemaError("times must be strictly increasing")
            if np.any(diffs != diffs[0]):
                raise SchemaError("times must have a fixed step")

        observed = self.values[self.mask]
        if not np.all(np.isfinite(observed)):
            raise SchemaError("observed values must be finite")
        if PRECIP_CHANNEL in self.channels:
            k = self.channels.index(PRECIP_CHANNEL)
            precip = self.values[:, :, k][self.mask[:, :, k]]
            if np.any(precip < 0):
                raise SchemaError(
                    "precipitation must be non-negative wherever observed"
                )

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def step(self) -> pd.Timedelta:
        if len(self.times) < 2:
            return pd.Timedelta(days=1)
        return self.times[1] - self.times[0]

    @property
    def is_hourly(self) -> bool:
        return self.step < pd.Timedelta(days=1)

    @property
    def months(self) -> np.ndarray:
        """Calendar month (1..12) of every time step."""
        return self.times.month.to_numpy()

    def site_index(self, site_id: str) -> int:
        for i, site in enumerate(self.sites):
            if site.id == site_id:
                return i
        raise UnknownSiteError(f"Unknown site: {site_id}")

    def channel_index(self, channel: str) -> int:
        try:
            return self.channels.index(channel)
        except ValueError:
            raise UnknownChannelError(f"Unknown channel: {channel}")

    def channel_values(self, channel: str, site_id: Optional[str] = None) -> np.ndarray:
        """One channel at one site (first site by default); NaN where missing."""
        k = self.channel_index(channel)
        i = 0 if site_id is None else self.site_index(site_id)
        return self.values[i, :, k].copy()

    def select_times(self, selector: Union[np.ndarray, slice]) -> "MeteoSeries":
        """Sub-series over a boolean mask or slice of the time axis."""
        source = None if self.source_index is None else self.source_index[selector]
        return MeteoSeries(
            sites=list(self.sites),
            times=self.times[selector],
            channels=list(self.channels),
            values=self.values[:, selector, :],
            mask=self.mask[:, selector, :],
            units=dict(self.units),
            source_index=source,
        )

    def with_values(
        self, values: np.ndarray, mask: Optional[np.ndarray] = None
    ) -> "MeteoSeries":
        return replace(
            self,
            values=np.array(values, dtype=np.float64),
            mask=self.mask.copy() if mask is None else np.array(mask, dtype=bool),
            units=dict(self.units),
        )


@dataclass
class NeighborhoodSet:
    """Sites within ``radius_km`` of ``target``; the target is always first."""

    target: Site
    members: List[Site]
    radius_km: float
    distances_km: List[float] = field(default_factory=list)

    @property
    def member_ids(self) -> List[str]:
        return [site.id for site in self.members]


@dataclass
class SplitSpec:
    """Chronological train/validation/test split with purged event windows."""

    train_end: pd.Timestamp
    val_end: pd.Timestamp
    excluded_windows: List[Tuple[pd.Timestamp, pd.Timestamp]] = field(
        default_factory=list
    )

    def __post_init__(self) -> None:
        self.train_end = _as_utc(self.train_end)
        self.val_end = _as_utc(self.val_end)
        self.excluded_windows = [
            (_as_utc(start), _as_utc(end)) for start, end in self.excluded_windows
        ]
        if not self.train_end < self.val_end:
            raise ConfigError("split: train_end must precede val_end")
        for start, end in self.excluded_windows:
            if end < start:
                raise ConfigError(
                    f"split: excluded window {start}/{end} ends before it starts"
                )

    def validate(self, times: pd.DatetimeIndex) -> None:
        if len(times) == 0 or not self.val_end < times[-1]:
            raise ConfigError("split: val_end must precede the last time of the series")

    def excluded(self, times: pd.DatetimeIndex) -> np.ndarray:
        out = np.zeros(len(times), dtype=bool)
        for start, end in self.excluded_windows:
            out |= (times >= start) & (times <= end)
        return out

    def folds(self, times: pd.DatetimeIndex) -> Dict[str, np.ndarray]:
        """Boolean train/val/test masks; excluded windows are removed from all folds."""
        keep = ~self.excluded(times)
        return {
            "train": (times <= self.train_end) & keep,
            "val": (times > self.train_end) & (times <= self.val_end) & keep,
            "test": (times > self.val_end) & keep,
        }


@dataclass
class ChannelStats:
    """Per-channel training-fold mean and standard deviation."""

    mean: Dict[str, float]
    sd: Dict[str, float]

    def transform(self, values: np.ndarray, channel: str) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return (values - self.mean[channel]) / self.sd[channel]

    def invert(self, values: np.ndarray, channel: str) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return values * self.sd[channel] + self.mean[channel]

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {"mean": dict(self.mean), "sd": dict(self.sd)}

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, float]]) -> "ChannelStats":
        return cls(mean=dict(data["mean"]), sd=dict(data["sd"]))


def _as_utc(value: Any) -> pd.Timestamp:
    stamp = pd.Timestamp(value)
    if stamp.tzinfo is None:
        return stamp.tz_localize("UTC")
    return stamp.tz_convert("UTC")


def _bad_rows(parsed: pd.Series, raw: pd.Series, allow_empty: bool) -> np.ndarray:
    bad = parsed.isna().to_numpy()
    if allow_empty:
        bad &= raw.str.strip().to_numpy() != ""
    return np.flatnonzero(bad)


def load_series(
    path: Union[str, Path],
    schema: Sequence[str],
    units: Optional[Dict[str, str]] = None,
) -> MeteoSeries:
    """
    Load a series from the CSV contract ``time,site_id,lat,lon,<channel>...``.

    Args:
        path: CSV file, one row per (time, site), ISO-8601 UTC times
        schema: channels to load, in the order they should appear
        units: optional per-channel unit labels

    Returns:
        MeteoSeries on the full fixed-step grid; empty cells and absent
        (time, site) rows are masked.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Series file not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[])
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(str(e), int(match.group(1)) if match else None)
    except pd.errors.EmptyDataError:
        raise ParseError("empty file", 1)

    header = [column.strip() for column in frame.columns]
    frame.columns = header
    if header[:4] != CSV_KEY_COLUMNS:
        raise SchemaError(
            f"header must start with {','.join(CSV_KEY_COLUMNS)}, got {header[:4]}"
        )
    missing = [channel for channel in schema if channel not in header[4:]]
    if missing:
        raise SchemaError(f"channels missing from file: {missing}")
    if frame.empty:
        raise SchemaError("file contains no data rows")

    times = pd.to_datetime(
        frame["time"].str.strip(), utc=True, errors="coerce", format="ISO8601"
    )
    bad = _bad_rows(times, frame["time"], allow_empty=False)
    if bad.size:
        raise ParseError(
            f"invalid timestamp {frame['time'].iloc[bad[0]]!r}", int(bad[0]) + 2
        )

    coords = {}
    for column in ("lat", "lon"):
        coords[column] = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        bad = _bad_rows(coords[column], frame[column], allow_empty=False)
        if bad.size:
            raise ParseError(
                f"invalid {column} {frame[column].iloc[bad[0]]!r}", int(bad[0]) + 2
            )

    channel_data = {}
    for channel in schema:
        raw = frame[channel]
        parsed = pd.to_numeric(raw.str.strip().replace("", np.nan), errors="coerce")
        bad = _bad_rows(parsed, raw, allow_empty=True)
        if bad.size:
            raise ParseError(
                f"invalid {channel} value {raw.iloc[bad[0]]!r}", int(bad[0]) + 2
            )
        channel_data[channel] = parsed.to_numpy(dtype=np.float64)

    site_ids = frame["site_id"].str.strip().to_numpy()
    sites: List[Site] = []
    site_rows: Dict[str, int] = {}
    for row, site_id in enumerate(site_ids):
        lat, lon = float(coords["lat"].iloc[row]), float(coords["lon"].iloc[row])
        if site_id not in site_rows:
            site_rows[site_id] = len(sites)
            sites.append(Site(site_id, lat, lon))
        else:
            known = sites[site_rows[site_id]]
            if (known.lat, known.lon) != (lat, lon):
                raise SchemaError(
                    f"site {site_id} changes coordinates at line {row + 2}"
                )

    stamps = times.dt.tz_convert(None).to_numpy(dtype="datetime64[ns]")
    for site_id, index in site_rows.items():
        rows = np.flatnonzero(site_ids == site_id)
        diffs = np.diff(stamps[rows].astype("datetime64[ns]").astype(np.int64))
        if np.any(diffs == 0):
            line = int(rows[1:][diffs == 0][0]) + 2
            raise SchemaError(f"duplicated timestamp for site {site_id} at line {line}")
        if np.any(diffs < 0):
            line = int(rows[1:][diffs < 0][0]) + 2
            raise SchemaError(f"non-monotone times for site {site_id} at line {line}")

    unique_times = pd.DatetimeIndex(np.unique(stamps)).tz_localize("UTC")
    if len(unique_times) >= 2:
        gaps = np.diff(unique_times.asi8)
        step = int(gaps.min())
        if np.any(gaps % step != 0):
            raise SchemaError("timestamps do not lie on a fixed-step grid")
        grid = pd.date_range(
            unique_times[0], unique_times[-1], freq=pd.Timedelta(step, "ns")
        )
    else:
        grid = unique_times

    positions = grid.get_indexer(pd.DatetimeIndex(times))
    values = np.full((len(sites), len(grid), len(schema)), np.nan)
    site_positions = np.array([site_rows[s] for s in site_ids])
    for k, channel in enumerate(schema):
        values[site_positions, positions, k] = channel_data[channel]
    mask = np.isfinite(values)

    series = MeteoSeries(
        sites=sites,
        times=grid,
        channels=list(schema),
        values=values,
        mask=mask,
        units=dict(units or {}),
    )
    logger.info(
        f"Loaded {path.name}: {len(sites)} sites, {len(grid)} steps, "
        f"{int((~mask).sum())} masked entries"
    )
    return series


def write_series(series: MeteoSeries, path: Union[str, Path]) -> None:
    """Write a series in the CSV contract; masked entries become empty cells."""
    path = Path(path)
    n_sites, n_times, _ = series.values.shape
    stamps = series.times.strftime("%Y-%m-%dT%H:%M:%SZ")
    data = {
        "time": np.repeat(np.asarray(stamps), n_sites),
        "site_id": np.tile([site.id for site in series.sites], n_times),
        "lat": np.tile([site.lat for site in series.sites], n_times),
        "lon": np.tile([site.lon for site in series.sites], n_times),
    }
    for k, channel in enumerate(series.channels):
        data[channel] = series.values[:, :, k].T.reshape(-1)
    frame = pd.DataFrame(data)
    frame.to_csv(
        path, index=False, float_format="%.17g", na_rep="", lineterminator="\n"
    )
    logger.info(f"Wrote {n_times} steps x {n_sites} sites to {path}")


def great_circle_km(a: Site, b: Site) -> float:
    """Haversine distance on a sphere of radius 6371.0088 km."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = (
        math.sin(dphi / 2.0) ** 2
        + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def build_neighborhood(
    series: MeteoSeries, target_id: str, radius_km: float
) -> NeighborhoodSet:
    """
    Collect every site within ``radius_km`` (inclusive) of the target.

    Members are ordered target first, then by distance, ties kept in dataset order.
    """
    target = series.sites[series.site_index(target_id)]
    found = []
    for order, site in enumerate(series.sites):
        distance = great_circle_km(target, site)
        if distance <= radius_km or site.id == target.id:
            rank = -1.0 if site.id == target.id else distance
            found.append((rank, order, site, distance))
    found.sort(key=lambda item: (item[0], item[1]))
    logger.debug(
        f"Neighbourhood of {target_id} at {radius_km} km: {len(found)} members"
    )
    return NeighborhoodSet(
        target=target,
        members=[item[2] for item in found],
        radius_km=float(radius_km),
        distances_km=[item[3] for item in found],
    )


def standardize(
    series: MeteoSeries, split: SplitSpec
) -> Tuple[MeteoSeries, ChannelStats]:
    """Standardize each channel independently with training-fold statistics."""
    train = split.folds(series.times)["train"]
    means: Dict[str, float] = {}
    sds: Dict[str, float] = {}
    values = series.values.copy()
    for k, channel in enumerate(series.channels):
        block = series.values[:, train, k]
        observed = block[series.mask[:, train, k]]
        if observed.size < 2:
            raise DegenerateChannelError(
                f"channel {channel}: training fold has {observed.size} "
                "observed values, need >= 2"
            )
        mean = float(np.mean(observed))
        sd = float(np.std(observed))
        if not sd > 0.0:
            raise DegenerateChannelError(
                f"channel {channel} is constant on the training fold"
            )
        means[channel], sds[channel] = mean, sd
        values[:, :, k] = (series.values[:, :, k] - mean) / sd
    stats = ChannelStats(mean=means, sd=sds)
    logger.debug(
        f"Standardized channels {series.channels} "
        f"on {int(train.sum())} training steps"
    )
    return series.with_values(values), stats


def apply_stats(series: MeteoSeries, stats: ChannelStats) -> MeteoSeries:
    """Standardize a series with previously computed statistics."""
    values = series.values.copy()
    for k, channel in enumerate(series.channels):
        values[:, :, k] = stats.transform(series.values[:, :, k], channel)
    return series.with_values(values)


def purged_block_bootstrap(
    series: MeteoSeries,
    block_len: int,
    purge_gap: int,
    seed: int,
    split: Optional[SplitSpec] = None,
) -> MeteoSeries:
    """
    Circular block bootstrap of the training fold that never samples purged steps.

    Every step inside an excluded window, widened by ``purge_gap`` steps on both
    sides, is ineligible; a block is admissible only if none of its (circular)
    source steps is ineligible. The output has the training length, keeps the
    training timestamps and records provenance in ``source_index``.
    """
    if block_len < 1:
        raise ConfigError("bootstrap: block_len must be >= 1")
    if purge_gap < 0:
        raise ConfigError("bootstrap: purge_gap must be >= 0")

    if split is None:
        n_train = series.n_times
        purged = np.zeros(n_train, dtype=bool)
    else:
        n_train = int(np.sum(series.times <= split.train_end))
        purged = np.zeros(n_train, dtype=bool)
        train_times = series.times[:n_train]
        for start, end in split.excluded_windows:
            inside = np.flatnonzero((train_times >= start) & (train_times <= end))
            if inside.size:
                lo = max(0, int(inside[0]) - purge_gap)
                hi = min(n_train - 1, int(inside[-1]) + purge_gap)
                purged[lo : hi + 1] = True

    if n_train < block_len + purge_gap:
        raise ConfigError(
            f"bootstrap: training length {n_train} shorter than block_len + purge_gap "
            f"= {block_len + purge_gap}"
        )

    wrapped = np.concatenate([purged, purged[: block_len - 1]]).astype(np.int64)
    kernel = np.ones(block_len, dtype=np.int64)
    hits = np.convolve(wrapped, kernel, mode="valid")[:n_train]
    valid_starts = np.flatnonzero(hits == 0)
    if valid_starts.size == 0:
        raise ConfigError("bootstrap: no valid block start outside the purged regions")

    rng = np.random.default_rng(seed)
    n_blocks = -(-n_train // block_len)
    starts = rng.choice(valid_starts, size=n_blocks, replace=True)
    offsets = starts[:, None] + np.arange(block_len)[None, :]
    source = (offsets % n_train).reshape(-1)[:n_train]

    return MeteoSeries(
        sites=list(series.sites),
        times=series.times[:n_train],
        channels=list(series.channels),
        values=series.values[:, source, :],
        mask=series.mask[:, source, :],
        units=dict(series.units),
        source_index=source,
    )


def accumulate(series: MeteoSeries, channel: str, window: int) -> MeteoSeries:
    """Trailing ``window``-step sum of one channel; a missing contributor masks it."""
    if window < 1:
        raise ConfigError("accumulate: window must be >= 1")
    k = series.channel_index(channel)
    n_sites, n_times, _ = series.values.shape
    sums = np.full((n_sites, n_times, 1), np.nan)
    observed = np.zeros((n_sites, n_times, 1), dtype=bool)
    if n_times >= window:
        filled = np.where(series.mask[:, :, k], series.values[:, :, k], 0.0)
        view = np.lib.stride_tricks.sliding_window_view
        windows = view(filled, window, axis=1)
        complete = view(series.mask[:, :, k], window, axis=1)
        sums[:, window - 1 :, 0] = windows.sum(axis=-1)
        observed[:, window - 1 :, 0] = complete.all(axis=-1)
    name = f"{channel}_sum{window}"
    return MeteoSeries(
        sites=list(series.sites),
        times=series.times,
        channels=[name],
        values=sums,
        mask=observed,
        units={name: series.units.get(channel, "")},
    )


@dataclass
class InputLayout:
    """Column layout of the model input matrix built from a neighbourhood."""

    target_id: str
    member_ids: List[str]
    channels: List[str]

    @property
    def feature_names(self) -> List[str]:
        pairs = [(s, c) for s in self.member_ids for c in self.channels]
        values = [f"{site}:{channel}" for site, channel in pairs]
        masks = [f"{site}:{channel}:observed" for site, channel in pairs]
        return values + masks

    @property
    def input_dim(self) -> int:
        return 2 * len(self.member_ids) * len(self.channels)

    def value_columns(self, channel: str) -> List[int]:
        """Columns that carry ``channel`` values (one per member)."""
        if channel not in self.channels:
            raise UnknownChannelError(f"Unknown channel: {channel}")
        k = self.channels.index(channel)
        return [m * len(self.channels) + k for m in range(len(self.member_ids))]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "target_id": self.target_id,
            "member_ids": list(self.member_ids),
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "InputLayout":
        return cls(
            target_id=str(data["target_id"]),
            member_ids=[str(v) for v in data["member_ids"]],
            channels=[str(v) for v in data["channels"]],
        )


def neighborhood_inputs(series: MeteoSeries, layout: InputLayout) -> np.ndarray:
    """
    Model input matrix (T x input_dim) over the forward information set.

    Row t holds, for every member and channel, the (standardized) value at t with
    missing entries zeroed, followed by the matching observed/missing flags.
    """
    rows = [series.site_index(site_id) for site_id in layout.member_ids]
    cols = [series.channel_index(channel) for channel in layout.channels]
    block = series.values[np.ix_(rows, np.arange(series.n_times), cols)]
    observed = series.mask[np.ix_(rows, np.arange(series.n_times), cols)]
    values = np.where(observed, block, 0.0)
    values = values.transpose(1, 0, 2).reshape(series.n_times, -1)
    flags = observed.transpose(1, 0, 2).reshape(series.n_times, -1).astype(np.float64)
    return np.concatenate([values, flags], axis=1)
