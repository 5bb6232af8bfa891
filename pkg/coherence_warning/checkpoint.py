"""Self-describing JSON checkpoints for trained models."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .rnn_core import RmModel
from .timeseries import ChannelStats, DataError, InputLayout

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "coherence-warning-checkpoint/1"


class CheckpointError(DataError):
    """Unreadable or inconsistent checkpoint."""

    pass


@dataclass
class Checkpoint:
    model: RmModel
    layout: Optional[InputLayout] = None
    stats: Optional[ChannelStats] = None
    extra: Optional[Dict[str, Any]] = None


def save_checkpoint(
    path: Union[str, Path],
    model: RmModel,
    layout: Optional[InputLayout] = None,
    stats: Optional[ChannelStats] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    """
    Write the model as JSON; every tensor is stored with its shape and row-major values.

    Args:
        path: destination file
        model: model to store
        layout: input column layout used to build the model inputs
        stats: training-fold channel statistics
        extra: additional JSON-serializable metadata
    """
    path = Path(path)
    document = {
        "format": CHECKPOINT_FORMAT,
        "cell_kind": model.cell_kind,
        "hidden_dim": model.hidden_dim,
        "input_dim": model.input_dim,
        "leads": list(model.leads),
        "dist_hidden": model.dist_hidden,
        "tensors": {
            name: {
                "shape": list(model.params[name].shape),
                "values": [float(v) for v in model.params[name].reshape(-1)],
            }
            for name in model.parameter_names
        },
        "layout": layout.to_dict() if layout is not None else None,
        "stats": stats.to_dict() if stats is not None else None,
        "extra": extra or {},
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=1)
            f.write("\n")
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise
    logger.info(f"Saved {model.cell_kind} checkpoint to {path}")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Checkpoint {path} is not valid JSON: {e}")

    if document.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"Unsupported checkpoint format: {document.get('format')!r}"
        )

    try:
        params = {
            name: np.array(tensor["values"], dtype=np.float64).reshape(tensor["shape"])
            for name, tensor in document["tensors"].items()
        }
        model = RmModel(
            cell_kind=document["cell_kind"],
            input_dim=int(document["input_dim"]),
            hidden_dim=int(document["hidden_dim"]),
            leads=[int(v) for v in document["leads"]],
            dist_hidden=int(document["dist_hidden"]),
            params=params,
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} is inconsistent: {e}")

    layout = None
    if document.get("layout"):
        layout = InputLayout.from_dict(document["layout"])
    stats = ChannelStats.from_dict(document["stats"]) if document.get("stats") else None
    logger.debug(f"Loaded checkpoint {path}")
    return Checkpoint(
        model=model, layout=layout, stats=stats, extra=document.get("extra") or {}
    )
