"""
Command implementations: data preparation, training, calibration, detection,
evaluation, replication and the planted-change experiment.

Every function takes a validated :class:`RunConfig`, writes its artifacts under
``out_dir`` and returns the in-memory results so tests can inspect them.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from .baselines import Climatology, persistence_forecast
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .detector import (
    AlarmTrace,
    BlockBootstrapSource,
    DefectSeries,
    DetectorReport,
    NullCalibration,
    SrStatistic,
    SrThreshold,
    arl_curve,
    calibrate_cusum_threshold,
    calibrate_level_threshold,
    calibrate_paths,
    channel_attribution,
    cusum_run,
    defect_series,
    deficit_threshold,
    dominant_channel_model,
    estimate_null,
    evaluate_detector,
    level_run,
    likelihood_ratio,
    sr_run,
)
from .forecast_dist import TwoPartDist, crps_mean, exceedance
from .reports import (
    ALARM_COLUMNS,
    ARL_CURVE_COLUMNS,
    CALIBRATION_COLUMNS,
    DETECTOR_COLUMNS,
    LOSS_COLUMNS,
    METRIC_COLUMNS,
    TRACE_COLUMNS,
    alarm_frame,
    calibration_frame,
    detector_frame,
    metrics_frame,
    read_json,
    trace_frame,
    write_csv,
    write_json,
)
from .rnn_core import RmModel, forward_pass, init_model, predict
from .synth import (
    ChangeSpec,
    gen_climatology,
    inject,
    read_manifest,
    synthesize,
    write_manifest,
)
from .timeseries import (
    ChannelStats,
    DataError,
    InputLayout,
    MeteoSeries,
    apply_stats,
    build_neighborhood,
    load_series,
    neighborhood_inputs,
    purged_block_bootstrap,
    standardize,
    write_series,
)
from .training import LossLog, train
from .verification import (
    DegenerateFitError,
    SpiCalibration,
    brier,
    forecast_spi_path,
    mae,
    pod_far,
    rmse,
    rolling_sum,
    spi,
    spi3_rmse,
    spi_transform,
)

logger = logging.getLogger(__name__)

BRIER_THRESHOLDS = (5.0, 20.0, 50.0)
SPI3_WINDOW = 90
EXPERIMENT_BURN_IN = 100

PathLike = Union[str, Path]
MetricRow = Dict[str, Any]
ReplicateFn = Callable[[RunConfig, "PreparedData", int], List[MetricRow]]


@dataclass(frozen=True)
class DetectorSettings:
    """Detector protocol resolved for one time resolution."""

    eta: float = 1.0
    target_arl0: float = 1000.0
    n_boot: int = 1000
    n_ci: int = 200
    monthly: bool = False
    block_len: int = 90
    detection_window: int = 90
    cusum_k: float = 0.5
    deficit_percentile: float = 10.0
    accumulation_window: int = 90
    flood_threshold: float = 50.0
    max_censored: float = 0.01
    event_kind: str = "drought"
    reset: bool = True
    suppress: int = 0

    @property
    def cusum_direction(self) -> str:
        return "drought" if self.event_kind == "drought" else "flood"

    @property
    def level_direction(self) -> str:
        return "deficit" if self.event_kind == "drought" else "exceedance"


@dataclass
class PreparedData:
    """Raw and standardized series with the model inputs of one neighbourhood."""

    raw: MeteoSeries
    stats: ChannelStats
    layout: InputLayout
    inputs: np.ndarray
    targets: np.ndarray
    folds: Dict[str, np.ndarray]

    @property
    def times(self) -> pd.DatetimeIndex:
        return self.raw.times

    @property
    def hourly(self) -> bool:
        return self.raw.is_hourly


def prepare_data(
    cfg: RunConfig, series: Optional[MeteoSeries] = None
) -> PreparedData:
    """Load (unless given), split, standardize on training and build the inputs."""
    if series is None:
        if cfg.data is None:
            raise ConfigError("data: no input series configured")
        series = load_series(cfg.data, cfg.channels)
    target = cfg.target or series.sites[0].id
    hood = build_neighborhood(series, target, cfg.radius_km)
    split = cfg.split_spec(series.times)
    split.validate(series.times)
    standardized, channel_stats = standardize(series, split)
    layout = InputLayout(
        target_id=target, member_ids=hood.member_ids, channels=list(cfg.channels)
    )
    logger.info(
        f"Prepared {series.n_times} steps, target {target}, "
        f"{len(hood.members)} neighbourhood members"
    )
    return PreparedData(
        raw=series,
        stats=channel_stats,
        layout=layout,
        inputs=neighborhood_inputs(standardized, layout),
        targets=series.channel_values("P", target),
        folds=split.folds(series.times),
    )


def model_inputs(series: MeteoSeries, checkpoint: Checkpoint) -> np.ndarray:
    """Inputs of ``series`` under the layout and statistics stored in a checkpoint."""
    if checkpoint.layout is None or checkpoint.stats is None:
        raise DataError("checkpoint carries no input layout or channel statistics")
    return neighborhood_inputs(
        apply_stats(series, checkpoint.stats), checkpoint.layout
    )


def fit_model(
    cfg: RunConfig, data: PreparedData, seed: int
) -> Tuple[RmModel, LossLog]:
    model = init_model(
        cfg.cell_kind,
        data.layout.input_dim,
        cfg.hidden_dim,
        cfg.leads,
        cfg.dist_hidden,
        seed=seed,
    )
    return train(
        model, data.inputs, data.targets, cfg.train_config(seed), data.folds["train"]
    )


# -- scores for the classical baselines ---------------------------------------


@dataclass
class ScoreModel:
    """Maps precipitation to the CUSUM score.

    Droughts use SPI, floods the standardized trailing sum.
    """

    kind: str
    window: int
    spi_calibration: Optional[SpiCalibration] = None
    center: float = 0.0
    scale: float = 1.0

    def scores(self, precip: np.ndarray, months: np.ndarray) -> np.ndarray:
        sums = rolling_sum(precip, self.window)
        if self.kind == "drought":
            if self.spi_calibration is None:
                raise ConfigError("drought score model has no SPI calibration")
            return spi_transform(sums, months, self.spi_calibration)
        return (sums - self.center) / self.scale

    def to_dict(self) -> Dict[str, Any]:
        calibration = None
        if self.spi_calibration is not None:
            calibration = {
                k: [float(v) for v in getattr(self.spi_calibration, k)]
                for k in ("alpha", "beta", "q")
            }
        return {
            "kind": self.kind,
            "window": self.window,
            "spi": calibration,
            "center": self.center,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScoreModel":
        calibration = None
        if data.get("spi"):
            calibration = SpiCalibration(
                **{k: np.array(v) for k, v in data["spi"].items()}
            )
        return cls(
            data["kind"],
            int(data["window"]),
            calibration,
            float(data["center"]),
            float(data["scale"]),
        )


def fit_score_model(
    precip: np.ndarray,
    times: pd.DatetimeIndex,
    mask: np.ndarray,
    settings: DetectorSettings,
) -> ScoreModel:
    window = settings.accumulation_window
    if settings.event_kind == "drought":
        series = spi(
            rolling_sum(precip, window), times, calibration_mask=mask, window=window
        )
        return ScoreModel("drought", window, spi_calibration=series.calibration)
    sums = rolling_sum(precip, window)
    sample = sums[mask & np.isfinite(sums)]
    if sample.size < 2 or not np.std(sample) > 0.0:
        raise DegenerateFitError("flood score: calibration accumulations are constant")
    return ScoreModel(
        "flood", window, center=float(np.mean(sample)), scale=float(np.std(sample))
    )


# -- calibration --------------------------------------------------------------


@dataclass
class DetectorCalibration:
    """Everything detect and evaluate need to replay the calibrated detectors."""

    settings: DetectorSettings
    null: NullCalibration
    sr: SrThreshold
    cusum: SrThreshold
    level: SrThreshold
    percentile_threshold: float
    score_model: ScoreModel
    curve: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=ARL_CURVE_COLUMNS), repr=False
    )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "settings": asdict(self.settings),
            "null": self.null.to_dict(),
            "sr": asdict(self.sr),
            "cusum": asdict(self.cusum),
            "level": asdict(self.level),
            "percentile_threshold": self.percentile_threshold,
            "score_model": self.score_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectorCalibration":
        def threshold(entry: Dict[str, Any]) -> SrThreshold:
            entry = dict(entry)
            entry["ci95"] = tuple(entry["ci95"])
            return SrThreshold(**entry)

        return cls(
            settings=DetectorSettings(**data["settings"]),
            null=NullCalibration.from_dict(data["null"]),
            sr=threshold(data["sr"]),
            cusum=threshold(data["cusum"]),
            level=threshold(data["level"]),
            percentile_threshold=float(data["percentile_threshold"]),
            score_model=ScoreModel.from_dict(data["score_model"]),
        )


def _fold_defects(defects: DefectSeries, fold: np.ndarray) -> DefectSeries:
    """Defects whose availability time (one step after the pair) lies in ``fold``."""
    return defects.select(np.asarray(fold, dtype=bool)[1:])


def calibrate_detectors(
    model: RmModel,
    inputs: np.ndarray,
    precip: np.ndarray,
    times: pd.DatetimeIndex,
    folds: Dict[str, np.ndarray],
    settings: DetectorSettings,
    seed: int,
    workers: int = 1,
) -> DetectorCalibration:
    """
    Calibrate SR, CUSUM and the accumulation-threshold baseline to the same ARL0.

    The null is the validation fold: its defects for SR, its scores for CUSUM
    and its trailing accumulations for the threshold rule, each resampled in
    circular blocks of ``settings.block_len`` steps.
    """
    defects = defect_series(forward_pass(inputs, model).trajectory, model, times)
    null_defects = _fold_defects(defects, folds["val"])
    null = estimate_null(null_defects, eta=settings.eta, monthly=settings.monthly)
    common: Dict[str, Any] = dict(
        n_boot=settings.n_boot,
        seed=seed,
        n_ci=settings.n_ci,
        workers=workers,
        max_censored=settings.max_censored,
    )

    source = BlockBootstrapSource(
        null_defects.r, null_defects.months, settings.block_len
    )
    sr_threshold, paths = calibrate_paths(
        source, SrStatistic(null), settings.target_arl0, **common
    )
    grid = np.geomspace(max(sr_threshold.B_star / 10.0, 1e-9), paths.cap, 40)
    curve = arl_curve(paths, grid, n_ci=settings.n_ci, seed=seed)

    months = times.month.to_numpy()
    score_model = fit_score_model(precip, times, folds["train"], settings)
    scores = score_model.scores(precip, months)
    keep = folds["val"] & np.isfinite(scores)
    cusum = calibrate_cusum_threshold(
        BlockBootstrapSource(scores[keep], months[keep], settings.block_len),
        settings.cusum_k,
        settings.target_arl0,
        direction=settings.cusum_direction,
        **common,
    )

    sums = rolling_sum(precip, settings.accumulation_window)
    keep = folds["val"] & np.isfinite(sums)
    level = calibrate_level_threshold(
        BlockBootstrapSource(sums[keep], None, settings.block_len),
        settings.target_arl0,
        direction=settings.level_direction,
        **common,
    )
    if settings.event_kind == "drought":
        percentile = deficit_threshold(
            precip,
            settings.accumulation_window,
            folds["train"],
            settings.deficit_percentile,
        )
    else:
        percentile = settings.flood_threshold
    return DetectorCalibration(
        settings, null, sr_threshold, cusum, level, percentile, score_model, curve
    )


# -- detector runs ------------------------------------------------------------


@dataclass
class DetectorRuns:
    """SR, CUSUM and threshold traces over one contiguous stretch of steps."""

    defects: np.ndarray
    sr: AlarmTrace
    cusum: AlarmTrace
    level: AlarmTrace

    @property
    def traces(self) -> List[AlarmTrace]:
        return [self.sr, self.cusum, self.level]


def run_detectors(
    calibration: DetectorCalibration,
    defects: DefectSeries,
    precip: np.ndarray,
    times: pd.DatetimeIndex,
    start: int,
    stop: int,
) -> DetectorRuns:
    """
    Run all detectors from a fresh start over steps [start, stop).

    ``defects`` must cover the same series from step 0: defect j is available at
    step j + 1. Alarm indices are relative to ``start``.
    """
    if start < 1 or stop > len(times) or stop - start < 1:
        raise ValueError("detector stretch must lie within steps [1, T)")
    settings = calibration.settings
    stretch = times[start:stop]
    r = defects.r[start - 1 : stop - 1]
    lam = likelihood_ratio(r, calibration.null, stretch.month.to_numpy())
    sr = sr_run(
        lam,
        calibration.sr.B_star,
        reset=settings.reset,
        suppress=settings.suppress,
        times=stretch,
    )

    months = times.month.to_numpy()
    scores = calibration.score_model.scores(precip, months)[start:stop]
    cusum = cusum_run(
        scores,
        settings.cusum_k,
        calibration.cusum.B_star,
        direction=settings.cusum_direction,
        reset=settings.reset,
        suppress=settings.suppress,
        times=stretch,
    )
    sums = rolling_sum(precip, settings.accumulation_window)[start:stop]
    level = level_run(
        sums,
        calibration.level.B_star,
        settings.level_direction,
        settings.suppress,
        stretch,
    )
    return DetectorRuns(defects=r, sr=sr, cusum=cusum, level=level)


def _fold_bounds(mask: np.ndarray) -> Tuple[int, int]:
    index = np.flatnonzero(mask)
    if index.size == 0:
        raise DataError("fold is empty")
    return max(1, int(index[0])), int(index[-1]) + 1


# -- forecast metrics ---------------------------------------------------------


def forecast_metrics(
    model_name: str,
    lead: int,
    obs: np.ndarray,
    point: np.ndarray,
    dist: Optional[TwoPartDist] = None,
    thresholds: Sequence[float] = BRIER_THRESHOLDS,
) -> Dict[str, float]:
    """RMSE, MAE, CRPS and per-threshold Brier/POD/FAR of aligned forecasts."""
    keep = np.isfinite(obs) & np.isfinite(point)
    obs, point = obs[keep], point[keep]
    scores = {"rmse": rmse(point, obs), "mae": mae(point, obs)}
    if dist is None:
        scores["crps"] = mae(point, obs)
    else:
        dist = dist[keep]
        scores["crps"] = crps_mean(dist, obs)
    for threshold in thresholds:
        if dist is None:
            prob = (point > threshold).astype(np.float64)
        else:
            prob = np.asarray(exceedance(dist, threshold))
        scores[f"brier_{threshold:g}"] = brier(prob, obs, threshold)
        pod, far, _ = pod_far(prob > 0.5, obs > threshold)
        scores[f"pod_{threshold:g}"] = pod
        scores[f"far_{threshold:g}"] = far
    return scores


def evaluate_forecasts(
    model: RmModel,
    inputs: np.ndarray,
    data: PreparedData,
    climatology: Optional[Climatology] = None,
) -> List[MetricRow]:
    """Score model, persistence and climatology over the test fold for every lead."""
    dist, point = predict(model, inputs)
    test = data.folds["test"]
    months = data.times.month.to_numpy()
    climatology = climatology or Climatology.fit(
        data.targets, months, data.folds["train"]
    )
    rows: List[MetricRow] = []
    T = data.targets.shape[0]
    for j, lead in enumerate(model.leads):
        issue = np.flatnonzero(test[: T - lead])
        obs = data.targets[issue + lead]
        verifying = months[issue + lead]
        candidates: Dict[str, Tuple[np.ndarray, Optional[TwoPartDist]]] = {
            "model": (point[issue, j], dist[issue, j]),
            "persistence": (persistence_forecast(data.targets, lead)[issue], None),
            "climatology": (
                climatology.point(verifying),
                climatology.distribution(verifying),
            ),
        }
        for name, (forecast, forecast_dist) in candidates.items():
            scores = forecast_metrics(name, lead, obs, forecast, forecast_dist)
            for metric, value in scores.items():
                rows.append(
                    {"metric": metric, "lead": lead, "model": name, "value": value}
                )
        if not data.hourly:
            rows.extend(_spi3_rows(lead, data, point[:, j], climatology, months))
    return rows


def _spi3_rows(
    lead: int,
    data: PreparedData,
    model_point: np.ndarray,
    climatology: Climatology,
    months: np.ndarray,
) -> List[MetricRow]:
    try:
        observed = spi(
            rolling_sum(data.targets, SPI3_WINDOW),
            data.times,
            data.folds["train"],
            SPI3_WINDOW,
        )
    except DegenerateFitError as e:
        logger.warning(f"SPI-3 skipped: {e}")
        return []
    T = data.targets.shape[0]
    test = data.folds["test"]
    rows: List[MetricRow] = []
    gap = np.full(lead, np.nan)
    shifted = {
        "model": np.concatenate([gap, model_point[: T - lead]]),
        "persistence": np.concatenate([gap, data.targets[: T - lead]]),
        "climatology": climatology.point(months),
    }
    for name, path in shifted.items():
        forecast = forecast_spi_path(path, months, observed.calibration, SPI3_WINDOW)
        both = test & np.isfinite(forecast) & np.isfinite(observed.spi)
        if np.any(both):
            value = spi3_rmse(forecast[both], observed.spi[both])
            rows.append(
                {"metric": "spi3_rmse", "lead": lead, "model": name, "value": value}
            )
    return rows


def aggregate_rows(per_replication: Sequence[Sequence[MetricRow]]) -> pd.DataFrame:
    """Mean and SD (ddof 1, or 0 for one replication) per metric, lead and model."""
    frame = pd.DataFrame(
        [row for rows in per_replication for row in rows],
        columns=["metric", "lead", "model", "value"],
    )
    n = len(per_replication)
    grouped = frame.groupby(["metric", "lead", "model"], sort=True)["value"]
    out = grouped.mean().rename("mean").to_frame()
    out["sd"] = grouped.std(ddof=1).fillna(0.0) if n > 1 else 0.0
    out["n_replications"] = n
    return metrics_frame(out.reset_index().to_dict("records"))


# -- commands -----------------------------------------------------------------


def _out(out_dir: PathLike) -> Path:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_synth(
    cfg: RunConfig, out_dir: PathLike, seed: Optional[int] = None
) -> Dict[str, Path]:
    """Write the synthetic series and its change manifest."""
    out = _out(out_dir)
    synth_cfg = cfg.synth_config(seed)
    specs = cfg.change_specs()
    series, onsets = synthesize(synth_cfg, specs)
    paths = {"series": out / "series.csv", "manifest": out / "manifest.json"}
    write_series(series, paths["series"])
    write_manifest(paths["manifest"], synth_cfg, specs, onsets, series.times)
    return paths


def run_train(
    cfg: RunConfig, out_dir: PathLike, seed: Optional[int] = None
) -> Tuple[RmModel, LossLog]:
    """Train on the training fold; write the checkpoint and the loss log."""
    out = _out(out_dir)
    seed = cfg.seed if seed is None else seed
    data = prepare_data(cfg)
    model, log = fit_model(cfg, data, seed)
    save_checkpoint(
        out / "checkpoint.json", model, data.layout, data.stats, extra={"seed": seed}
    )
    write_csv(log.to_frame(), out / "loss_log.csv", LOSS_COLUMNS)
    return model, log


def _settings(cfg: RunConfig, data: PreparedData) -> DetectorSettings:
    return cfg.detector_settings(data.hourly)


def run_calibrate(
    cfg: RunConfig,
    checkpoint_path: PathLike,
    out_dir: PathLike,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
) -> DetectorCalibration:
    """
    Calibrate every detector on the validation fold.

    Writes calibration.json, calibration.csv and arl_curve.csv.
    """
    out = _out(out_dir)
    seed = cfg.seed if seed is None else seed
    data = prepare_data(cfg)
    checkpoint = load_checkpoint(checkpoint_path)
    calibration = calibrate_detectors(
        checkpoint.model,
        model_inputs(data.raw, checkpoint),
        data.targets,
        data.times,
        data.folds,
        _settings(cfg, data),
        seed,
        workers or cfg.resolved_workers(),
    )
    write_json(calibration.to_dict(), out / "calibration.json")
    write_csv(
        calibration_frame([calibration.sr]),
        out / "calibration.csv",
        CALIBRATION_COLUMNS,
    )
    write_csv(calibration.curve, out / "arl_curve.csv", ARL_CURVE_COLUMNS)
    return calibration


def run_detect(
    cfg: RunConfig,
    checkpoint_path: PathLike,
    calibration_path: PathLike,
    out_dir: PathLike,
) -> DetectorRuns:
    """Run the calibrated detectors over the test fold; write trace and alarms."""
    out = _out(out_dir)
    data = prepare_data(cfg)
    checkpoint = load_checkpoint(checkpoint_path)
    calibration = DetectorCalibration.from_dict(read_json(calibration_path))
    inputs = model_inputs(data.raw, checkpoint)
    trajectory = forward_pass(inputs, checkpoint.model).trajectory
    defects = defect_series(trajectory, checkpoint.model, data.times)
    start, stop = _fold_bounds(data.folds["test"])
    runs = run_detectors(calibration, defects, data.targets, data.times, start, stop)
    write_csv(trace_frame(runs.defects, runs.sr), out / "trace.csv", TRACE_COLUMNS)
    write_csv(
        alarm_frame(runs.traces, calibration.settings.event_kind),
        out / "alarms.csv",
        ALARM_COLUMNS,
    )
    logger.info(
        f"Detect: SR raised {runs.sr.alarms.size} alarm(s) "
        f"over {stop - start} test steps"
    )
    return runs


def event_windows(
    onsets: Sequence[int],
    detection_window: int,
    n_times: int,
    pre: Optional[int] = None,
) -> List[Tuple[int, int]]:
    """Stretch [onset - pre, onset + window + 1) per onset, clipped to the series."""
    pre = 2 * detection_window if pre is None else pre
    return [
        (max(1, onset - pre), min(n_times, onset + detection_window + 1))
        for onset in onsets
    ]


def null_windows(
    mask: np.ndarray, busy: Sequence[Tuple[int, int]], length: int
) -> List[Tuple[int, int]]:
    """Consecutive stretches of ``length`` steps inside ``mask`` avoiding busy ones."""
    free = np.asarray(mask, dtype=bool).copy()
    free[0] = False
    for start, stop in busy:
        free[start:stop] = False
    out: List[Tuple[int, int]] = []
    padded = np.concatenate([[False], free, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    for start, stop in zip(edges[::2], edges[1::2]):
        for chunk in range(int(start), int(stop) - length + 1, length):
            out.append((chunk, chunk + length))
    return out


def score_detectors(
    calibration: DetectorCalibration,
    event_runs: Sequence[Tuple[DetectorRuns, int]],
    null_runs: Sequence[DetectorRuns],
) -> List[DetectorReport]:
    settings = calibration.settings
    reports: List[DetectorReport] = []
    for name in ("sr", "cusum", "level"):
        reports.append(
            evaluate_detector(
                [getattr(runs, name) for runs, _ in event_runs],
                [onset for _, onset in event_runs],
                [getattr(runs, name) for runs in null_runs],
                settings.detection_window,
                detector=name if name != "level" else settings.level_direction,
            )
        )
    return reports


def run_evaluate(
    cfg: RunConfig,
    checkpoint_path: PathLike,
    out_dir: PathLike,
    calibration_path: Optional[PathLike] = None,
) -> Tuple[pd.DataFrame, Optional[pd.DataFrame]]:
    """
    Forecast metrics for model and baselines.

    Detector reports are added when both a manifest and a calibration exist.
    """
    out = _out(out_dir)
    data = prepare_data(cfg)
    checkpoint = load_checkpoint(checkpoint_path)
    inputs = model_inputs(data.raw, checkpoint)
    metrics = aggregate_rows([evaluate_forecasts(checkpoint.model, inputs, data)])
    write_csv(metrics, out / "metrics.csv", METRIC_COLUMNS)

    if cfg.manifest is None or calibration_path is None:
        return metrics, None
    specs, onsets = read_manifest(cfg.manifest)
    calibration = DetectorCalibration.from_dict(read_json(calibration_path))
    settings = calibration.settings
    onsets = [
        onset
        for spec, onset in zip(specs, onsets)
        if spec.kind == settings.event_kind
    ]
    trajectory = forward_pass(inputs, checkpoint.model).trajectory
    defects = defect_series(trajectory, checkpoint.model, data.times)
    windows = event_windows(onsets, settings.detection_window, len(data.times))
    event_runs = [
        (
            run_detectors(
                calibration, defects, data.targets, data.times, start, stop
            ),
            onset - start,
        )
        for (start, stop), onset in zip(windows, onsets)
    ]
    length = max(
        (stop - start for start, stop in windows), default=settings.detection_window
    )
    null_runs = [
        run_detectors(calibration, defects, data.targets, data.times, start, stop)
        for start, stop in null_windows(data.folds["test"], windows, length)
    ]
    frame = detector_frame(score_detectors(calibration, event_runs, null_runs))
    write_csv(frame, out / "detector_report.csv", DETECTOR_COLUMNS)
    return metrics, frame


def replicate_once(cfg: RunConfig, data: PreparedData, seed: int) -> List[MetricRow]:
    """
    One replication: purged block bootstrap of the training fold, fresh
    training and test-fold scores.
    """
    hourly = data.hourly
    split = cfg.split_spec(data.times)
    sample = purged_block_bootstrap(
        data.raw,
        cfg.resolved_block_len(hourly),
        cfg.resolved_purge_gap(hourly),
        seed,
        split,
    )
    resampled = PreparedData(
        raw=sample,
        stats=data.stats,
        layout=data.layout,
        inputs=neighborhood_inputs(apply_stats(sample, data.stats), data.layout),
        targets=sample.channel_values("P", data.layout.target_id),
        folds={"train": np.ones(sample.n_times, dtype=bool)},
    )
    model, _ = fit_model(cfg, resampled, seed)
    months = sample.times.month.to_numpy()
    climatology = Climatology.fit(resampled.targets, months)
    return evaluate_forecasts(model, data.inputs, data, climatology)


ReplicateChunk = Tuple[ReplicateFn, RunConfig, PreparedData, List[int]]


def _replicate_chunk(args: ReplicateChunk) -> List[List[MetricRow]]:
    replicate_fn, cfg, data, seeds = args
    return [replicate_fn(cfg, data, seed) for seed in seeds]


def run_replicate(
    cfg: RunConfig,
    out_dir: PathLike,
    n: Optional[int] = None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    replicate_fn: ReplicateFn = replicate_once,
    data: Optional[PreparedData] = None,
) -> pd.DataFrame:
    """
    Repeat training and evaluation with seeds base_seed + i; aggregate mean and SD.

    Replications are split into contiguous chunks across worker processes and
    gathered in replication order, so the report does not depend on ``workers``.
    """
    out = _out(out_dir)
    n = cfg.replications if n is None else n
    base = cfg.seed if seed is None else seed
    workers = workers or cfg.resolved_workers()
    if n < 1:
        raise ConfigError("replications must be >= 1")
    data = data or prepare_data(cfg)
    seeds = [base + i for i in range(n)]
    logger.info(f"Running {n} replication(s) from seed {base} on {workers} worker(s)")
    if workers <= 1:
        results = _replicate_chunk((replicate_fn, cfg, data, seeds))
    else:
        size = -(-n // workers)
        chunks: List[ReplicateChunk] = [
            (replicate_fn, cfg, data, seeds[i : i + size]) for i in range(0, n, size)
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [
                rows for chunk in pool.map(_replicate_chunk, chunks) for rows in chunk
            ]
    report = aggregate_rows(results)
    write_csv(report, out / "replication_report.csv", METRIC_COLUMNS)
    return report


# -- planted-change experiment ------------------------------------------------


@dataclass
class ExperimentResult:
    """
    Detector comparison on planted events.

    ``detection_pvalues`` holds one SR-versus-threshold test per event kind:
    droughts are scored against the deficit rule, floods against the exceedance
    rule. The pass flag uses the drought (deficit) comparison.
    """

    reports: Dict[str, List[DetectorReport]]
    detection_pvalues: Dict[str, float]
    lead_pvalue: float
    attribution_rate: float
    n_events: int

    @property
    def detection_pvalue(self) -> float:
        return self.detection_pvalues.get("drought", float("nan"))

    @property
    def sr_not_worse(self) -> bool:
        return self.detection_pvalue >= 0.05

    @property
    def flood_lead_positive(self) -> bool:
        return self.lead_pvalue < 0.05

    @property
    def attribution_ok(self) -> bool:
        return self.attribution_rate >= 0.9

    def summary(self) -> Dict[str, Any]:
        flood = self.detection_pvalues.get("flood", float("nan"))
        return {
            "n_events": self.n_events,
            "detection_pvalue": self.detection_pvalue,
            "detection_pvalue_flood": flood,
            "lead_pvalue": self.lead_pvalue,
            "attribution_rate": self.attribution_rate,
            "sr_not_worse": self.sr_not_worse,
            "flood_lead_positive": self.flood_lead_positive,
            "attribution_ok": self.attribution_ok,
        }


def _event_spec(
    cfg: RunConfig, kind: str, onset: int, seed: int, settings: DetectorSettings
) -> ChangeSpec:
    return ChangeSpec(
        kind=kind,
        onset=onset,
        wet_multiplier=cfg.wet_multiplier,
        amount_multiplier=cfg.amount_multiplier,
        t_shift=cfg.t_shift,
        q_shift=cfg.q_shift,
        duration=cfg.flood_duration,
        intensity=cfg.flood_intensity,
        threshold=settings.flood_threshold,
        window=settings.accumulation_window,
        lead=cfg.flood_lead,
        seed=seed,
    )


def plant_events(
    cfg: RunConfig,
    data: PreparedData,
    model: RmModel,
    calibration: DetectorCalibration,
    n_events: int,
    seed: int,
    attribution_channel: Optional[str] = None,
) -> Tuple[List[Tuple[DetectorRuns, int]], List[Optional[str]]]:
    """
    Inject ``n_events`` changes at random test-fold onsets; run detectors on each.

    Returns the detector runs with the onset relative to the run start and, when
    an attribution channel is given, the top-ranked channel of a model that
    reads only that channel for every event.
    """
    settings = calibration.settings
    kind = settings.event_kind
    window = settings.detection_window
    lead = cfg.flood_lead if kind == "flood" else 0
    pre = 2 * window + lead
    post = window + cfg.flood_duration + 1
    test = np.flatnonzero(data.folds["test"])
    lo, hi = int(test[0]) + pre + EXPERIMENT_BURN_IN, int(test[-1]) - post
    if hi <= lo:
        raise ConfigError("test fold too short to plant events")
    rng = np.random.default_rng([seed, 0 if kind == "drought" else 1])
    onsets = rng.integers(lo, hi, size=n_events)
    focused: Optional[RmModel] = None
    if attribution_channel:
        focused = dominant_channel_model(model, data.layout, attribution_channel)

    runs: List[Tuple[DetectorRuns, int]] = []
    ranked: List[Optional[str]] = []
    for i, onset in enumerate(onsets):
        spec = _event_spec(cfg, kind, int(onset), seed + i, settings)
        changed, true_onset = inject(data.raw, spec)
        start = max(1, int(onset) - pre)
        stop = min(changed.n_times, int(true_onset) + post)
        burn = max(0, start - EXPERIMENT_BURN_IN)
        standardized = apply_stats(changed, data.stats)
        inputs = neighborhood_inputs(standardized, data.layout)[burn:stop]
        precip = changed.channel_values("P", data.layout.target_id)
        defects = defect_series(forward_pass(inputs, model).trajectory, model)
        padded = DefectSeries(np.concatenate([np.zeros(burn), defects.r]))
        detected = run_detectors(
            calibration, padded, precip, changed.times, start, stop
        )
        runs.append((detected, int(true_onset) - start))
        if focused is not None:
            focus = slice(start - burn - 1, stop - burn - 1)
            ranking = channel_attribution(focused, inputs, data.layout, focus)
            ranked.append(ranking[0][0])
    return runs, ranked


def run_experiment(
    cfg: RunConfig,
    out_dir: PathLike,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    n_events: Optional[int] = None,
) -> ExperimentResult:
    """
    Train on a synthetic climatology, calibrate SR, CUSUM and the threshold
    rule to a common ARL0, plant droughts and floods in the test fold and
    compare the detectors.
    """
    out = _out(out_dir)
    seed = cfg.seed if seed is None else seed
    n_events = cfg.n_events if n_events is None else n_events
    workers = workers or cfg.resolved_workers()
    data = prepare_data(cfg, gen_climatology(cfg.synth_config(seed)))
    model, log = fit_model(cfg, data, seed)
    write_csv(log.to_frame(), out / "loss_log.csv", LOSS_COLUMNS)
    trajectory = forward_pass(data.inputs, model).trajectory
    defects = defect_series(trajectory, model, data.times)

    reports: Dict[str, List[DetectorReport]] = {}
    pvalues: Dict[str, float] = {}
    ranked: List[Optional[str]] = []
    for kind in ("drought", "flood"):
        flood = kind == "flood"
        settings = replace(cfg.detector_settings(flood), event_kind=kind)
        calibration = calibrate_detectors(
            model,
            data.inputs,
            data.targets,
            data.times,
            data.folds,
            settings,
            seed,
            workers,
        )
        channel = "Omega" if flood and "Omega" in data.layout.channels else None
        events, top = plant_events(
            cfg, data, model, calibration, n_events, seed, channel
        )
        if top:
            ranked = top
        length = max(runs.sr.statistic.size for runs, _ in events)
        null_runs = [
            run_detectors(calibration, defects, data.targets, data.times, start, stop)
            for start, stop in null_windows(data.folds["test"], [], length)
        ]
        reports[kind] = score_detectors(calibration, events, null_runs)
        pvalues[kind] = _detection_pvalue(
            [(runs, onset, settings.detection_window) for runs, onset in events]
        )
        write_csv(
            detector_frame(reports[kind]),
            out / f"detector_report_{kind}.csv",
            DETECTOR_COLUMNS,
        )

    attribution = float("nan")
    if ranked:
        attribution = float(np.mean([name == "Omega" for name in ranked]))
    result = ExperimentResult(
        reports=reports,
        detection_pvalues=pvalues,
        lead_pvalue=_lead_pvalue(reports["flood"][0].leads),
        attribution_rate=attribution,
        n_events=n_events,
    )
    write_json(result.summary(), out / "experiment.json")
    logger.info(f"Experiment: {result.summary()}")
    return result


def _detected(runs: DetectorRuns, onset: int, window: int, name: str) -> bool:
    alarms = getattr(runs, name).alarms
    return bool(np.any(np.abs(alarms - onset) <= window))


def _detection_pvalue(events: Sequence[Tuple[DetectorRuns, int, int]]) -> float:
    """
    One-sided exact test that SR detects fewer events than the threshold rule,
    over the discordant pairs.
    """
    sr_only = level_only = 0
    for runs, onset, window in events:
        sr = _detected(runs, onset, window, "sr")
        level = _detected(runs, onset, window, "level")
        sr_only += sr and not level
        level_only += level and not sr
    discordant = sr_only + level_only
    if discordant == 0:
        return 1.0
    test = stats.binomtest(sr_only, discordant, 0.5, alternative="less")
    return float(test.pvalue)


def _lead_pvalue(leads: Sequence[int]) -> float:
    """One-sided sign test that SR leads are positive."""
    nonzero = [lead for lead in leads if lead != 0]
    if not nonzero:
        return 1.0
    positive = sum(lead > 0 for lead in nonzero)
    test = stats.binomtest(positive, len(nonzero), 0.5, alternative="greater")
    return float(test.pvalue)
