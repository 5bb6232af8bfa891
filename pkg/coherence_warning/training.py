"""Joint training of the forecaster and backward projector, plus gradient checking."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import ConfigError
from .forecast_dist import EmptyBatchError
from .rnn_core import LossWeights, NumericError, RmModel, loss_and_gradients, loss_value

logger = logging.getLogger(__name__)


class TrainingError(NumericError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, epoch: int) -> None:
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


@dataclass
class TrainConfig:
    """Epoch budget, regularization schedule and optimizer settings."""

    epochs: int = 30
    warmup: int = 5
    lambda0: float = 0.1
    gamma: float = 0.1
    learning_rate: float = 0.01
    clip_norm: float = 5.0
    seed: int = 0
    rm_window: int = 0
    seq_len: int = 128
    aux_weight: float = 0.1

    def __post_init__(self) -> None:
        if not 0 <= self.warmup < self.epochs:
            raise ConfigError("train: need 0 <= warmup < epochs")
        if self.lambda0 < 0:
            raise ConfigError("train: lambda0 must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError("train: gamma must lie in (0, 1]")
        if self.learning_rate < 0 or self.clip_norm <= 0:
            raise ConfigError("train: learning_rate must be >= 0 and clip_norm > 0")
        if self.rm_window == 1 or self.rm_window < 0:
            raise ConfigError("train: rm_window must be 0 or >= 2")
        if self.seq_len < 2:
            raise ConfigError("train: seq_len must be >= 2")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(nll=1.0, aux=self.aux_weight)


@dataclass
class EpochRecord:
    epoch: int
    task: float
    rm: float
    lam: float


@dataclass
class LossLog:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            [asdict(r) for r in self.records], columns=["epoch", "task", "rm", "lam"]
        )
        return frame.rename(columns={"task": "L_task", "rm": "L_RM", "lam": "lambda"})


def lambda_schedule(k: int, cfg: TrainConfig) -> float:
    """0 during warm-up (k <= K0), then lambda0 * gamma ** ((k - K0) / (K - K0))."""
    if k <= cfg.warmup:
        return 0.0
    return cfg.lambda0 * cfg.gamma ** ((k - cfg.warmup) / (cfg.epochs - cfg.warmup))


def sequence_slices(train_mask: np.ndarray, seq_len: int) -> List[slice]:
    """Cut each contiguous run of training steps into ``seq_len`` chunks.

    Chunks shorter than two steps are dropped.
    """
    mask = np.asarray(train_mask, dtype=bool)
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    slices = []
    for start, stop in zip(edges[::2], edges[1::2]):
        for lo in range(start, stop, seq_len):
            hi = min(lo + seq_len, stop)
            if hi - lo >= 2:
                slices.append(slice(int(lo), int(hi)))
    return slices


def _clip(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(
    model: RmModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    train_mask: Optional[np.ndarray] = None,
) -> Tuple[RmModel, LossLog]:
    """
    Gradient descent on L_task + lambda_k L_RM, one clipped step per sequence.

    Args:
        model: initial model (not modified)
        inputs: T x input_dim standardized inputs
        targets: length-T precipitation targets in mm, NaN where missing
        cfg: training configuration
        train_mask: steps usable for training (default: all)

    Returns:
        Trained copy of the model and the per-epoch loss log
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if train_mask is None:
        mask = np.ones(inputs.shape[0], dtype=bool)
    else:
        mask = np.asarray(train_mask, dtype=bool)
    slices = sequence_slices(mask, cfg.seq_len)
    if not slices:
        raise EmptyBatchError("no training sequence of length >= 2")

    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    log = LossLog()
    logger.info(
        f"Training {model.cell_kind} d={model.hidden_dim} on {len(slices)} sequences "
        f"for {cfg.epochs} epochs (warm-up {cfg.warmup})"
    )

    for epoch in range(1, cfg.epochs + 1):
        lam = lambda_schedule(epoch, cfg)
        order = rng.permutation(len(slices))
        task_sum, rm_sum, used = 0.0, 0.0, 0
        for index in order:
            window = slices[index]
            try:
                parts, grads = loss_and_gradients(
                    model,
                    inputs[window],
                    targets[window],
                    lam,
                    cfg.weights,
                    cfg.rm_window,
                )
            except EmptyBatchError:
                logger.debug(f"Skipping sequence {window} without observed targets")
                continue
            except NumericError as e:
                logger.error(f"Training diverged at epoch {epoch}: {e}")
                raise TrainingError(str(e), epoch)
            if not math.isfinite(parts.total):
                logger.error(f"Non-finite loss at epoch {epoch}")
                raise TrainingError("non-finite loss", epoch)
            _clip(grads, cfg.clip_norm)
            for name, grad in grads.items():
                model.params[name] -= cfg.learning_rate * grad
            task_sum += parts.task
            rm_sum += parts.rm
            used += 1
        if used == 0:
            raise EmptyBatchError("no training sequence has observed targets")
        record = EpochRecord(
            epoch=epoch, task=task_sum / used, rm=rm_sum / used, lam=lam
        )
        if not (math.isfinite(record.task) and math.isfinite(record.rm)):
            raise TrainingError("non-finite epoch loss", epoch)
        log.append(record)
        logger.info(
            f"epoch {epoch}: L_task={record.task:.6f} L_RM={record.rm:.6f} "
            f"lambda={lam:.6g}"
        )

    return model, log


def gradient_check(
    model: RmModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    lam: float,
    weights: LossWeights = LossWeights(),
    rm_window: int = 0,
    step: float = 1e-5,
    floor: float = 1e-5,
    names: Optional[Sequence[str]] = None,
) -> float:
    """
    Maximum relative error between analytic and central-difference gradients.

    The relative error of each entry is |a - n| / max(|a|, |n|, floor).
    """
    if model.hidden_dim > 8 or np.asarray(inputs).shape[0] > 12:
        raise ValueError("gradient_check is limited to d <= 8 and T <= 12")
    _, grads = loss_and_gradients(model, inputs, targets, lam, weights, rm_window)
    perturbed = model.copy()
    worst = 0.0
    for name in names or model.parameter_names:
        values = perturbed.params[name]
        flat = values.reshape(-1)
        analytic = grads[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = loss_value(perturbed, inputs, targets, lam, weights, rm_window)
            flat[i] = original - step
            down = loss_value(perturbed, inputs, targets, lam, weights, rm_window)
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            if not (math.isfinite(numeric) and math.isfinite(analytic[i])):
                raise NumericError(f"non-finite gradient for {name}[{i}]")
            scale = max(abs(analytic[i]), abs(numeric), floor)
            error = abs(analytic[i] - numeric) / scale
            worst = max(worst, error)
    logger.debug(f"Gradient check max relative error {worst:.3e}")
    return worst
