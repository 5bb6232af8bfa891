"""
Unit tests for JSON model checkpoints.
"""

import json

import numpy as np
import pytest

from coherence_warning.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from coherence_warning.rnn_core import init_model
from coherence_warning.timeseries import ChannelStats, DataError, InputLayout


@pytest.fixture
def model():
    return init_model(
        "lstm", input_dim=4, hidden_dim=3, leads=[1, 6], dist_hidden=2, seed=5
    )


class TestCheckpoint:
    """Save and load."""

    @pytest.mark.unit
    def test_round_trip(self, model, tmp_path):
        layout = InputLayout(target_id="S000", member_ids=["S000"], channels=["P", "T"])
        stats = ChannelStats(mean={"P": 1.0, "T": 20.0}, sd={"P": 2.0, "T": 3.0})
        path = tmp_path / "model.json"
        save_checkpoint(path, model, layout=layout, stats=stats, extra={"epochs": 3})

        loaded = load_checkpoint(path)
        assert loaded.model.cell_kind == "lstm"
        assert loaded.model.leads == [1, 6]
        for name in model.parameter_names:
            np.testing.assert_array_equal(loaded.model.params[name], model.params[name])
        assert loaded.layout == layout
        assert loaded.stats == stats
        assert loaded.extra == {"epochs": 3}

    @pytest.mark.unit
    def test_optional_sections(self, model, tmp_path):
        path = tmp_path / "bare.json"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.layout is None and loaded.stats is None
        assert loaded.extra == {}

    @pytest.mark.unit
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.json")

    @pytest.mark.unit
    def test_invalid_json(self, write_text):
        with pytest.raises(CheckpointError, match="not valid JSON"):
            load_checkpoint(write_text("broken.json", "{not json"))

    @pytest.mark.unit
    def test_wrong_format(self, write_text):
        with pytest.raises(CheckpointError, match="Unsupported"):
            load_checkpoint(write_text("other.json", '{"format": "something-else"}'))

    @pytest.mark.unit
    def test_inconsistent_shapes(self, model, tmp_path):
        path = tmp_path / "model.json"
        save_checkpoint(path, model)
        document = json.loads(path.read_text(encoding="utf-8"))
        document["hidden_dim"] = 5
        path.write_text(json.dumps(document), encoding="utf-8")

        with pytest.raises(CheckpointError, match="inconsistent"):
            load_checkpoint(path)

    @pytest.mark.unit
    def test_is_a_data_error(self):
        assert issubclass(CheckpointError, DataError)
