"""
Unit tests for CSV and JSON result artifacts.
"""

import numpy as np
import pandas as pd
import pytest

from coherence_warning.detector import AlarmTrace, DetectorReport, SrThreshold
from coherence_warning.reports import (
    ALARM_COLUMNS,
    CALIBRATION_COLUMNS,
    DETECTOR_COLUMNS,
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


@pytest.fixture
def trace():
    times = pd.date_range("2001-03-01", periods=4, freq="h", tz="UTC")
    return AlarmTrace(
        statistic=np.array([0.5, 2.5, 0.0, 3.0]),
        threshold=2.0,
        alarms=np.array([1, 3]),
        detector="sr",
        times=times,
    )


class TestFrames:
    """Tabular views of detector results."""

    @pytest.mark.unit
    def test_calibration(self):
        threshold = SrThreshold(
            B_star=99.5, target_arl0=100.0, ci95=(98.0, 101.0), n_boot=500, seed=2
        )
        frame = calibration_frame([threshold])
        assert list(frame.columns) == CALIBRATION_COLUMNS
        assert frame.iloc[0].to_dict() == {
            "target_arl0": 100.0,
            "B_star": 99.5,
            "ci_lo": 98.0,
            "ci_hi": 101.0,
            "n_boot": 500,
            "seed": 2,
        }

    @pytest.mark.unit
    def test_trace(self, trace):
        frame = trace_frame(np.array([0.1, 0.2, 0.3, 0.4]), trace)
        assert list(frame.columns) == TRACE_COLUMNS
        assert frame["time"].iloc[1] == "2001-03-01T01:00:00Z"
        np.testing.assert_array_equal(frame["B"], 2.0)

    @pytest.mark.unit
    def test_trace_without_times(self, trace):
        trace.times = None
        frame = trace_frame(np.zeros(4), trace)
        assert list(frame["time"]) == [0, 1, 2, 3]

    @pytest.mark.unit
    def test_alarms(self, trace):
        frame = alarm_frame([trace], "flood")
        assert list(frame.columns) == ALARM_COLUMNS
        assert list(frame["time"]) == ["2001-03-01T01:00:00Z", "2001-03-01T03:00:00Z"]
        assert list(frame["statistic"]) == [2.5, 3.0]
        assert set(frame["event_kind"]) == {"flood"}

    @pytest.mark.unit
    def test_no_alarms(self, trace):
        trace.alarms = np.array([], dtype=int)
        frame = alarm_frame([trace], "drought")
        assert frame.empty
        assert list(frame.columns) == ALARM_COLUMNS

    @pytest.mark.unit
    def test_detector_summary(self):
        report = DetectorReport(
            detector="cusum",
            arl0=120.0,
            arl0_censored=False,
            detection_rate=0.8,
            mean_lead=3.5,
            far=0.1,
            miss_rate=0.2,
            n_events=10,
        )
        frame = detector_frame([report])
        assert list(frame.columns) == DETECTOR_COLUMNS
        assert frame.iloc[0]["detector"] == "cusum"

    @pytest.mark.unit
    def test_metrics_sorted(self):
        keys = ("metric", "lead", "model", "mean", "sd", "n_replications")
        rows = [
            dict(zip(keys, ("rmse", 1, "rm", 1.0, 0.1, 3))),
            dict(zip(keys, ("crps", 6, "rm", 2.0, 0.2, 3))),
            dict(zip(keys, ("crps", 1, "baseline", 3.0, 0.3, 3))),
        ]
        frame = metrics_frame(rows)
        assert list(frame.columns) == METRIC_COLUMNS
        assert list(zip(frame["metric"], frame["lead"])) == [
            ("crps", 1),
            ("crps", 6),
            ("rmse", 1),
        ]


class TestWriters:
    """File output."""

    @pytest.mark.unit
    def test_csv_header_and_nan(self, tmp_path):
        frame = pd.DataFrame({"a": [1.0, np.nan], "b": [1 / 3, 2.0], "extra": [0, 0]})
        path = write_csv(frame, tmp_path / "out" / "table.csv", ["a", "b"])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines == ["a,b", "1,0.3333333333", "NaN,2"]

    @pytest.mark.unit
    def test_json_round_trip(self, tmp_path):
        document = {"b": [1, 2], "a": {"x": 1.5}}
        path = write_json(document, tmp_path / "nested" / "doc.json")
        assert read_json(path) == document
        text = path.read_text(encoding="utf-8")
        assert text.index('"a"') < text.index('"b"')
