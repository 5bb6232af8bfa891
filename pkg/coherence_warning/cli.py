"""Command-line interface: ``coherence-warning <command> [options]``."""

import functools
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, TypeVar, cast

import click

from .config import ConfigError, RunConfig, load_config
from .rnn_core import NumericError
from .timeseries import DataError

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

F = TypeVar("F", bound=Callable[..., Any])


class Context:
    """Group-level options shared by every command."""

    def __init__(
        self,
        config: Optional[Path],
        seed: Optional[int],
        workers: Optional[int],
        out: Path,
        env_file: Optional[Path],
    ) -> None:
        self.config_path = config
        self.seed = seed
        self.workers = workers
        self.out = out
        self.env_file = env_file

    def load(self, require_files: bool = True) -> RunConfig:
        overrides: Dict[str, Any] = {"seed": self.seed, "workers": self.workers}
        return load_config(
            self.config_path,
            overrides=overrides,
            env_file=self.env_file,
            require_files=require_files,
        )


def _fail(message: str, code: int) -> None:
    click.echo(f"[ERROR] {message}", err=True)
    sys.exit(code)


def _guard(func: F) -> F:
    """Translate domain errors into exit codes after logging them."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"Configuration error: {e}")
            _fail(f"Configuration error: {e}", EXIT_CONFIG)
        except DataError as e:
            logger.error(f"Data error: {e}")
            _fail(f"Data error: {e}", EXIT_DATA)
        except NumericError as e:
            logger.error(f"Numeric error: {e}")
            _fail(f"Numeric error: {e}", EXIT_NUMERIC)

    return cast(F, wrapper)


@click.group()
@click.option(
    "--config",
    "config",
    type=click.Path(path_type=Path),
    default=None,
    help="Run configuration file",
)
@click.option("--seed", type=int, default=None, help="Base seed (overrides the config)")
@click.option(
    "--workers", type=click.IntRange(min=1), default=None, help="Worker processes"
)
@click.option(
    "--out",
    type=click.Path(path_type=Path),
    default=Path("out"),
    show_default=True,
    help="Output directory",
)
@click.option(
    "--env-file",
    type=click.Path(path_type=Path),
    default=None,
    help="dotenv file with CW_ overrides",
)
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default=lambda: os.environ.get("CW_LOG_LEVEL", "INFO"),
    help="Logging level (env: CW_LOG_LEVEL)",
)
@click.pass_context
def cli(
    ctx: click.Context,
    config: Optional[Path],
    seed: Optional[int],
    workers: Optional[int],
    out: Path,
    env_file: Optional[Path],
    log_level: str,
) -> None:
    """Coupled precipitation forecasting and Shiryaev-Roberts early warning."""
    logging.basicConfig(
        level=getattr(logging, str(log_level).upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = Context(config, seed, workers, out, env_file)


@cli.command("check-config")
@click.pass_obj
@_guard
def check_config(obj: Context) -> None:
    """Print the resolved configuration."""
    cfg = obj.load(require_files=False)
    click.echo(cfg.to_text(), nl=False)
    click.echo("[OK] Configuration is valid", err=True)


@cli.command()
@click.pass_obj
@_guard
def synth(obj: Context) -> None:
    """Generate a synthetic series and its change manifest."""
    from .pipeline import run_synth

    paths = run_synth(obj.load(require_files=False), obj.out, obj.seed)
    click.echo(f"[OK] Series written to {paths['series']}")
    click.echo(f"[OK] Manifest written to {paths['manifest']}")


@cli.command()
@click.pass_obj
@_guard
def train(obj: Context) -> None:
    """Train the forecaster and write checkpoint.json and loss_log.csv."""
    from .pipeline import run_train

    _, log = run_train(obj.load(), obj.out, obj.seed)
    last = log.records[-1]
    click.echo(
        f"[OK] Trained {len(log.records)} epochs: "
        f"L_task={last.task:.6f} L_RM={last.rm:.6f}"
    )


def _checkpoint_option(func: F) -> F:
    return click.option(
        "--checkpoint",
        type=click.Path(path_type=Path),
        default=None,
        help="Checkpoint (default: <out>/checkpoint.json)",
    )(func)


def _calibration_option(func: F) -> F:
    return click.option(
        "--calibration",
        type=click.Path(path_type=Path),
        default=None,
        help="Calibration (default: <out>/calibration.json)",
    )(func)


def _existing(path: Optional[Path], default: Path, what: str) -> Path:
    path = path or default
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


@cli.command()
@_checkpoint_option
@click.pass_obj
@_guard
def calibrate(obj: Context, checkpoint: Optional[Path]) -> None:
    """Calibrate SR, CUSUM and threshold detectors to the target ARL0."""
    from .pipeline import run_calibrate

    cfg = obj.load()
    checkpoint = _existing(checkpoint, obj.out / "checkpoint.json", "checkpoint")
    result = run_calibrate(cfg, checkpoint, obj.out, obj.seed, obj.workers)
    lo, hi = result.sr.ci95
    click.echo(
        f"[OK] B* = {result.sr.B_star:.6g} (95% CI {lo:.6g} .. {hi:.6g}) "
        f"for ARL0 {result.sr.target_arl0:g}"
    )
    for threshold in (result.sr, result.cusum, result.level):
        if not threshold.converged:
            click.echo(
                f"[WARNING] {threshold.detector} threshold reaches "
                f"ARL0 {threshold.achieved_arl0:.1f}, "
                f"target {threshold.target_arl0:g}"
            )


@cli.command()
@_checkpoint_option
@_calibration_option
@click.pass_obj
@_guard
def detect(
    obj: Context, checkpoint: Optional[Path], calibration: Optional[Path]
) -> None:
    """Run calibrated detectors over the test fold; write trace.csv and alarms.csv."""
    from .pipeline import run_detect

    cfg = obj.load()
    checkpoint = _existing(checkpoint, obj.out / "checkpoint.json", "checkpoint")
    calibration = _existing(calibration, obj.out / "calibration.json", "calibration")
    runs = run_detect(cfg, checkpoint, calibration, obj.out)
    click.echo(
        f"[OK] SR alarms: {runs.sr.alarms.size}, "
        f"CUSUM alarms: {runs.cusum.alarms.size}"
    )


@cli.command()
@_checkpoint_option
@_calibration_option
@click.pass_obj
@_guard
def evaluate(
    obj: Context, checkpoint: Optional[Path], calibration: Optional[Path]
) -> None:
    """Forecast metrics against baselines; detector reports when a manifest is set."""
    from .pipeline import run_evaluate

    cfg = obj.load()
    checkpoint = _existing(checkpoint, obj.out / "checkpoint.json", "checkpoint")
    if calibration is None and (obj.out / "calibration.json").exists():
        calibration = obj.out / "calibration.json"
    metrics, detectors = run_evaluate(cfg, checkpoint, obj.out, calibration)
    click.echo(f"[OK] {len(metrics)} metric rows written to {obj.out / 'metrics.csv'}")
    if detectors is not None:
        click.echo(f"[OK] Detector report written to {obj.out / 'detector_report.csv'}")


@cli.command()
@click.option(
    "--n",
    "n",
    type=click.IntRange(min=1),
    default=None,
    help="Replications (default: config)",
)
@click.pass_obj
@_guard
def replicate(obj: Context, n: Optional[int]) -> None:
    """Bootstrap replications of training and evaluation; mean and SD report."""
    from .pipeline import run_replicate

    report = run_replicate(
        obj.load(), obj.out, n=n, seed=obj.seed, workers=obj.workers
    )
    n_done = int(report["n_replications"].iloc[0])
    click.echo(f"[OK] Aggregated {n_done} replication(s)")


@cli.command()
@click.option(
    "--events",
    type=click.IntRange(min=1),
    default=None,
    help="Planted events per kind",
)
@click.pass_obj
@_guard
def experiment(obj: Context, events: Optional[int]) -> None:
    """Planted drought/flood experiment comparing SR with CUSUM and threshold rules."""
    from .pipeline import run_experiment

    result = run_experiment(
        obj.load(require_files=False), obj.out, obj.seed, obj.workers, events
    )
    for key, value in result.summary().items():
        click.echo(f"{key}: {value}")
    click.echo(f"[OK] Experiment written to {obj.out}")


def main() -> None:
    cli(prog_name="coherence-warning")


if __name__ == "__main__":
    main()
