"""Run configuration: key = value files, CW_ environment overrides and validation."""

import logging
import os
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Literal, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

if TYPE_CHECKING:
    import pandas as pd

    from .pipeline import DetectorSettings
    from .synth import SynthConfig
    from .timeseries import SplitSpec
    from .training import TrainConfig

try:
    from dotenv import load_dotenv

    DOTENV_AVAILABLE = True
except ImportError:
    DOTENV_AVAILABLE = False

try:
    import psutil

    PSUTIL_AVAILABLE = True
except ImportError:
    PSUTIL_AVAILABLE = False

logger = logging.getLogger(__name__)

ENV_PREFIX = "CW_"
PATH_KEYS = ("data", "manifest")


class ConfigError(Exception):
    """Invalid run configuration or invalid derived settings."""

    pass


def default_workers() -> int:
    """Physical core count, falling back to the logical count."""
    if PSUTIL_AVAILABLE:
        cores = psutil.cpu_count(logical=False)
        if cores:
            return int(cores)
    return os.cpu_count() or 1


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class RunConfig(BaseModel):
    """Validated experiment protocol; held constant across replications."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # data
    data: Optional[str] = None
    manifest: Optional[str] = None
    channels: List[str] = Field(default_factory=lambda: ["P", "T", "q", "Omega"])
    target: Optional[str] = None
    radius_km: float = Field(25.0, ge=0.0)
    train_end: Optional[str] = None
    val_end: Optional[str] = None
    excluded_windows: List[Tuple[str, str]] = Field(default_factory=list)

    # model
    cell_kind: Literal["elman", "gru", "lstm"] = "gru"
    hidden_dim: int = Field(32, ge=1)
    dist_hidden: int = Field(16, ge=1)
    leads: List[int] = Field(default_factory=lambda: [1])

    # training
    epochs: int = Field(30, ge=1)
    warmup: int = Field(5, ge=0)
    lambda0: float = Field(0.1, ge=0.0)
    gamma: float = Field(0.1, gt=0.0, le=1.0)
    learning_rate: float = Field(0.01, ge=0.0)
    clip_norm: float = Field(5.0, gt=0.0)
    rm_window: int = Field(0, ge=0)
    seq_len: int = Field(128, ge=2)
    aux_weight: float = Field(0.1, ge=0.0)

    # detector
    eta: float = Field(1.0, gt=0.0)
    target_arl0: float = Field(1000.0, ge=1.0)
    n_boot: int = Field(1000, ge=100)
    n_ci: int = Field(200, ge=10)
    monthly_null: bool = False
    block_len: Optional[int] = Field(None, ge=1)
    purge_gap: Optional[int] = Field(None, ge=0)
    detection_window: Optional[int] = Field(None, ge=1)
    cusum_k: float = Field(0.5, ge=0.0)
    deficit_percentile: float = Field(10.0, gt=0.0, lt=100.0)
    drought_window: int = Field(90, ge=1)
    flood_window: int = Field(3, ge=1)
    flood_threshold: float = Field(50.0, gt=0.0)
    max_censored: float = Field(0.01, ge=0.0, le=1.0)

    # replication
    replications: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    workers: Optional[int] = Field(None, ge=1)

    # synthetic climatology
    n_sites: int = Field(5, ge=1)
    steps: int = Field(5000, ge=2)
    step_unit: Literal["hour", "day"] = "day"
    seasonal_amplitude: float = Field(0.3, ge=0.0, le=1.0)
    p_wet: float = Field(0.3, ge=0.0, lt=1.0)
    persistence: float = Field(0.7, ge=0.0, lt=1.0)
    wet_mu: float = 1.0
    wet_sigma: float = Field(1.0, gt=0.0)
    decorrelation_km: float = Field(20.0, gt=0.0)
    spread_km: float = Field(10.0, ge=0.0)
    center_lat: float = Field(25.0, ge=-90.0, le=90.0)
    center_lon: float = Field(121.5, ge=-180.0, le=180.0)
    start: str = "2000-01-01T00:00:00Z"

    # injected change
    inject: Literal["none", "drought", "flood"] = "none"
    inject_onset: Optional[int] = Field(None, ge=0)
    wet_multiplier: float = Field(0.2, gt=0.0, le=1.0)
    amount_multiplier: float = Field(0.5, gt=0.0)
    t_shift: float = 0.0
    q_shift: float = 0.0
    flood_intensity: float = Field(1.2, gt=1.0)
    flood_duration: int = Field(3, ge=1)
    flood_lead: int = Field(4, ge=0)

    # planted-change experiment
    n_events: int = Field(100, ge=1)

    @field_validator("channels", "leads", mode="before")
    @classmethod
    def _comma_list(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("excluded_windows", mode="before")
    @classmethod
    def _windows(cls, value: Any) -> Any:
        if isinstance(value, str):
            windows = []
            for chunk in value.split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                parts = chunk.split("/")
                if len(parts) != 2:
                    raise ValueError(f"window {chunk!r} is not start/end")
                windows.append((parts[0].strip(), parts[1].strip()))
            return windows
        return value

    @field_validator("leads")
    @classmethod
    def _positive_leads(cls, value: List[int]) -> List[int]:
        if not value or any(lead < 1 for lead in value):
            raise ValueError("leads must be a non-empty list of positive steps")
        return value

    @field_validator("channels")
    @classmethod
    def _channels_with_precip(cls, value: List[str]) -> List[str]:
        if "P" not in value:
            raise ValueError("channel list must include P")
        return value

    @model_validator(mode="after")
    def _cross_field(self) -> "RunConfig":
        if not self.warmup < self.epochs:
            raise ValueError("warmup must be smaller than epochs (0 <= K0 < K)")
        if self.rm_window == 1:
            raise ValueError("rm_window must be 0 (full sequence) or >= 2")
        if self.inject != "none" and self.inject_onset is None:
            raise ValueError("inject_onset is required when inject is set")
        return self

    @property
    def is_hourly(self) -> bool:
        return self.step_unit == "hour"

    def resolved_workers(self) -> int:
        return self.workers or default_workers()

    def resolved_block_len(self, hourly: bool) -> int:
        return self.block_len or (168 if hourly else 90)

    def resolved_purge_gap(self, hourly: bool) -> int:
        if self.purge_gap is None:
            return self.resolved_block_len(hourly)
        return self.purge_gap

    def resolved_detection_window(self, hourly: bool) -> int:
        return self.detection_window or (24 if hourly else 90)

    def split_spec(self, times: Optional["pd.DatetimeIndex"] = None) -> "SplitSpec":
        """SplitSpec; missing boundaries default to 60% / 80% of the time axis."""
        from .timeseries import SplitSpec

        train_end, val_end = self.train_end, self.val_end
        if train_end is None or val_end is None:
            if times is None:
                raise ConfigError("train_end and val_end are required without a series")
            n = len(times)
            train_end = train_end or times[int(0.6 * n) - 1]
            val_end = val_end or times[int(0.8 * n) - 1]
        spec = SplitSpec(
            train_end=train_end,
            val_end=val_end,
            excluded_windows=list(self.excluded_windows),
        )
        if times is not None:
            spec.validate(times)
        return spec

    def train_config(self, seed: Optional[int] = None) -> "TrainConfig":
        from .training import TrainConfig

        return TrainConfig(
            epochs=self.epochs,
            warmup=self.warmup,
            lambda0=self.lambda0,
            gamma=self.gamma,
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            seed=self.seed if seed is None else seed,
            rm_window=self.rm_window,
            seq_len=self.seq_len,
            aux_weight=self.aux_weight,
        )

    def synth_config(self, seed: Optional[int] = None) -> "SynthConfig":
        from .synth import SynthConfig

        return SynthConfig(
            n_sites=self.n_sites,
            steps=self.steps,
            step_unit=self.step_unit,
            seasonal_amplitude=self.seasonal_amplitude,
            p_wet=self.p_wet,
            persistence=self.persistence,
            wet_mu=self.wet_mu,
            wet_sigma=self.wet_sigma,
            decorrelation_km=self.decorrelation_km,
            spread_km=self.spread_km,
            center_lat=self.center_lat,
            center_lon=self.center_lon,
            start=self.start,
            seed=self.seed if seed is None else seed,
        )

    def change_specs(self) -> List[Any]:
        from .synth import ChangeSpec

        if self.inject == "none":
            return []
        return [
            ChangeSpec(
                kind=self.inject,
                onset=int(self.inject_onset),
                wet_multiplier=self.wet_multiplier,
                amount_multiplier=self.amount_multiplier,
                t_shift=self.t_shift,
                q_shift=self.q_shift,
                duration=self.flood_duration,
                intensity=self.flood_intensity,
                threshold=self.flood_threshold,
                window=self.flood_window,
                lead=self.flood_lead,
                seed=self.seed,
            )
        ]

    def detector_settings(self, hourly: bool) -> "DetectorSettings":
        from .pipeline import DetectorSettings

        return DetectorSettings(
            eta=self.eta,
            target_arl0=self.target_arl0,
            n_boot=self.n_boot,
            n_ci=self.n_ci,
            monthly=self.monthly_null,
            block_len=self.resolved_block_len(hourly),
            detection_window=self.resolved_detection_window(hourly),
            cusum_k=self.cusum_k,
            deficit_percentile=self.deficit_percentile,
            accumulation_window=self.flood_window if hourly else self.drought_window,
            flood_threshold=self.flood_threshold,
            max_censored=self.max_censored,
            event_kind="flood" if hourly else "drought",
        )

    def to_text(self) -> str:
        """Render as a config file that parses back to the same configuration."""
        lines = []
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if key == "excluded_windows":
                value = "; ".join(f"{start}/{end}" for start, end in value)
            elif isinstance(value, list):
                value = ", ".join(str(item) for item in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"{source}:{number}: expected 'key = value', got {raw.strip()!r}"
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        values[key] = value
    return values


def env_overrides(prefix: str = ENV_PREFIX) -> Dict[str, str]:
    """Config keys overridden through ``CW_<KEY>`` environment variables."""
    known = set(RunConfig.model_fields)
    found = {}
    for name, value in os.environ.items():
        if name.startswith(prefix):
            key = name[len(prefix):].lower()
            if key in known:
                found[key] = value
    return found


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
    env_file: Optional[Path] = None,
    require_files: bool = True,
) -> RunConfig:
    """
    Resolve a RunConfig from defaults, a config file, the environment and flags.

    Args:
        path: config file with ``key = value`` lines (optional)
        overrides: values from command-line flags; highest precedence
        env_file: dotenv file loaded before reading ``CW_`` variables
        require_files: check that referenced data files exist

    Returns:
        Validated RunConfig
    """
    if env_file is not None:
        if not DOTENV_AVAILABLE:
            raise ConfigError("python-dotenv is required for --env-file support")
        if not Path(env_file).exists():
            raise ConfigError(f"Environment file not found: {env_file}")
        load_dotenv(env_file, override=False)
    elif DOTENV_AVAILABLE and (Path.cwd() / ".env").exists():
        load_dotenv(Path.cwd() / ".env", override=False)

    merged: Dict[str, Any] = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        merged.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
        base_dir = path.parent

    merged.update(env_overrides())
    merged.update(
        {key: value for key, value in (overrides or {}).items() if value is not None}
    )

    for key in PATH_KEYS:
        if merged.get(key):
            candidate = Path(str(merged[key]))
            if not candidate.is_absolute():
                candidate = base_dir / candidate
            merged[key] = str(candidate)

    try:
        config = RunConfig.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"{key}: {first['msg']}")

    if require_files:
        for key in PATH_KEYS:
            value = getattr(config, key)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{key}: file not found: {value}")

    logger.debug(f"Resolved configuration from {path or 'defaults'}")
    return config
