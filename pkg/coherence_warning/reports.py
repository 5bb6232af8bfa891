"""CSV and JSON artifacts written by the pipeline commands."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .detector import AlarmTrace, DetectorReport, SrThreshold

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"

METRIC_COLUMNS = ["metric", "lead", "model", "mean", "sd", "n_replications"]
CALIBRATION_COLUMNS = ["target_arl0", "B_star", "ci_lo", "ci_hi", "n_boot", "seed"]
ARL_CURVE_COLUMNS = ["B", "arl0_median", "arl0_lo", "arl0_hi"]
TRACE_COLUMNS = ["time", "r_t", "R_t", "B"]
ALARM_COLUMNS = ["detector", "time", "statistic", "threshold", "event_kind"]
DETECTOR_COLUMNS = [
    "detector",
    "arl0",
    "detection_rate",
    "mean_lead",
    "far",
    "miss_rate",
    "n_events",
]
LOSS_COLUMNS = ["epoch", "L_task", "L_RM", "lambda"]

PathLike = Union[str, Path]


def write_csv(frame: pd.DataFrame, path: PathLike, columns: Sequence[str]) -> Path:
    """Write ``frame`` restricted to ``columns`` with the shared float format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.loc[:, list(columns)].to_csv(
        path,
        index=False,
        float_format=FLOAT_FORMAT,
        lineterminator="\n",
        na_rep="NaN",
    )
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_json(document: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _stamp(times: Optional[pd.DatetimeIndex], index: np.ndarray) -> List[Any]:
    if times is None:
        return [int(i) for i in index]
    return list(times[index].strftime("%Y-%m-%dT%H:%M:%SZ"))


def calibration_frame(thresholds: Iterable[SrThreshold]) -> pd.DataFrame:
    rows = [
        {
            "target_arl0": t.target_arl0,
            "B_star": t.B_star,
            "ci_lo": t.ci95[0],
            "ci_hi": t.ci95[1],
            "n_boot": t.n_boot,
            "seed": t.seed,
        }
        for t in thresholds
    ]
    return pd.DataFrame(rows, columns=CALIBRATION_COLUMNS)


def trace_frame(defects: np.ndarray, trace: AlarmTrace) -> pd.DataFrame:
    """One row per defect: time it became available, r_t, R_t and the threshold."""
    n = trace.statistic.size
    return pd.DataFrame(
        {
            "time": _stamp(trace.times, np.arange(n)),
            "r_t": np.asarray(defects, dtype=np.float64),
            "R_t": trace.statistic,
            "B": np.full(n, trace.threshold),
        },
        columns=TRACE_COLUMNS,
    )


def alarm_frame(traces: Iterable[AlarmTrace], event_kind: str) -> pd.DataFrame:
    rows = []
    for trace in traces:
        stamps = _stamp(trace.times, trace.alarms)
        for index, stamp in zip(trace.alarms, stamps):
            rows.append(
                {
                    "detector": trace.detector,
                    "time": stamp,
                    "statistic": float(trace.statistic[index]),
                    "threshold": trace.threshold,
                    "event_kind": event_kind,
                }
            )
    return pd.DataFrame(rows, columns=ALARM_COLUMNS)


def detector_frame(reports: Iterable[DetectorReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {name: getattr(report, name) for name in DETECTOR_COLUMNS}
            for report in reports
        ],
        columns=DETECTOR_COLUMNS,
    )


def metrics_frame(rows: Iterable[Dict[str, Any]]) -> pd.DataFrame:
    """Rows of metric/lead/model/mean/sd/n_replications sorted for stable output."""
    frame = pd.DataFrame(list(rows), columns=METRIC_COLUMNS)
    frame = frame.sort_values(["metric", "lead", "model"], kind="mergesort")
    return frame.reset_index(drop=True)
