"""
Coherence Warning - precipitation forecasting with a coherence-driven early warning.

A small recurrent forecaster is trained with a backward-coherence regularizer: a
residual projector learns to reconstruct h_t from h_{t+1}. The defect of that
reconstruction feeds a Shiryaev-Roberts detector whose threshold is calibrated
by Monte Carlo to a target in-control average run length.

Key Components:
- timeseries: CSV loading, neighbourhoods, standardization, purged block bootstrap
- rnn_core / training: Elman, GRU and LSTM cells, projector, loss and BPTT training
- forecast_dist / verification / baselines: two-part forecasts and their scores
- detector: SR, CUSUM and threshold detectors, ARL0 calibration, attribution
- synth: synthetic climatology with planted droughts and floods
- pipeline / cli: the ``coherence-warning`` command

Example Usage:
    >>> from coherence_warning import SynthConfig, gen_climatology, init_model
    >>>
    >>> series = gen_climatology(SynthConfig(steps=2000, seed=1))
    >>> model = init_model("gru", input_dim=40, hidden_dim=16, seed=1)
"""

from .config import ConfigError, RunConfig, load_config
from .detector import (
    CalibrationError,
    EventFreeError,
    calibrate_threshold,
    defect_series,
    estimate_null,
    evaluate_detector,
    likelihood_ratio,
    sr_run,
)
from .forecast_dist import TwoPartDist, crps
from .kernels import NUMBA_AVAILABLE
from .rnn_core import NumericError, RmModel, forward_pass, init_model
from .synth import ChangeSpec, SynthConfig, gen_climatology, inject
from .timeseries import DataError, MeteoSeries, load_series
from .training import TrainConfig, train

# Package metadata
__version__ = "1.0.0"
__description__ = (
    "Coherence-regularized precipitation forecasting "
    "with Shiryaev-Roberts early warning"
)

__all__ = [
    # Errors
    "ConfigError",
    "DataError",
    "NumericError",
    "CalibrationError",
    "EventFreeError",
    # Data and model
    "MeteoSeries",
    "load_series",
    "RmModel",
    "init_model",
    "forward_pass",
    "TrainConfig",
    "train",
    "TwoPartDist",
    "crps",
    # Detection
    "defect_series",
    "estimate_null",
    "likelihood_ratio",
    "sr_run",
    "calibrate_threshold",
    "evaluate_detector",
    # Synthetic data
    "SynthConfig",
    "ChangeSpec",
    "gen_climatology",
    "inject",
    # Configuration
    "RunConfig",
    "load_config",
    "has_numba",
    "__version__",
]

VERSION = tuple(map(int, __version__.split(".")))


def has_numba() -> bool:
    """Check whether the detector kernels are compiled with numba."""
    return NUMBA_AVAILABLE
