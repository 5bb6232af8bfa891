"""
Test configuration and fixtures for coherence-warning tests.
"""

import os
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import pytest

from coherence_warning.synth import SynthConfig, gen_climatology
from coherence_warning.timeseries import MeteoSeries, Site


def pytest_configure(config):
    config.addinivalue_line("markers", "unit: fast unit tests")
    config.addinivalue_line(
        "markers", "integration: tests that run several modules together"
    )
    config.addinivalue_line("markers", "slow: long-running tests")
    config.addinivalue_line(
        "markers", "acceptance: full-size acceptance runs (set CW_FULL_ACCEPTANCE=1)"
    )


@pytest.fixture(autouse=True)
def _restore_environ():
    """dotenv loading writes into os.environ; undo it after every test."""
    saved = dict(os.environ)
    yield
    os.environ.clear()
    os.environ.update(saved)


def make_series(
    values: np.ndarray,
    sites: Optional[List[Site]] = None,
    channels: Sequence[str] = ("P",),
    start: str = "2000-01-01",
    freq: str = "D",
    mask: Optional[np.ndarray] = None,
) -> MeteoSeries:
    """Series from a (sites, T, channels) array; default sites lie on the equator."""
    values = np.asarray(values, dtype=np.float64)
    n_sites, n_times, _ = values.shape
    if sites is None:
        sites = [Site(f"S{i:03d}", 0.0, 0.1 * i) for i in range(n_sites)]
    times = pd.date_range(start, periods=n_times, freq=freq, tz="UTC")
    if mask is None:
        mask = np.isfinite(values)
    return MeteoSeries(
        sites=sites, times=times, channels=list(channels), values=values, mask=mask
    )


@pytest.fixture
def series_factory():
    return make_series


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_synth_config():
    """Five sites, 400 daily steps."""
    return SynthConfig(n_sites=5, steps=400, seed=7)


@pytest.fixture
def small_series(small_synth_config):
    return gen_climatology(small_synth_config)


@pytest.fixture
def write_text(tmp_path):
    """Write ``text`` to ``tmp_path / name`` and return the path."""

    def _write(name: str, text: str) -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


HOURLY_CONFIG = """
# hourly flood-mode protocol on a small synthetic basin
step_unit = hour
steps = 1500
n_sites = 3
spread_km = 5
p_wet = 0.2
cell_kind = gru
hidden_dim = 4
dist_hidden = 3
leads = 1
epochs = 3
warmup = 1
seq_len = 64
learning_rate = 0.01
target_arl0 = 20
n_boot = 100
n_ci = 10
block_len = 24
purge_gap = 24
flood_threshold = 25
replications = 2
workers = 1
seed = 3
"""


@pytest.fixture
def hourly_config_text():
    return HOURLY_CONFIG
