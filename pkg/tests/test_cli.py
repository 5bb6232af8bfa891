"""
Tests for the command-line interface.
"""

import pandas as pd
import pytest
from click.testing import CliRunner

from coherence_warning.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, cli
from coherence_warning.rnn_core import NumericError
from coherence_warning.timeseries import DataError


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def data_config(write_text):
    """Config pointing at an existing (placeholder) data file."""
    write_text("series.csv", "time,site_id,lat,lon,P,T,q,Omega\n")
    return write_text("run.conf", "data = series.csv\nepochs = 3\nwarmup = 1\n")


class TestCheckConfig:
    """check-config prints the resolved configuration."""

    @pytest.mark.unit
    def test_valid(self, runner, write_text):
        conf = write_text("run.conf", "epochs = 7\ncell_kind = lstm\n")
        result = runner.invoke(cli, ["--config", str(conf), "check-config"])
        assert result.exit_code == 0
        assert "epochs = 7" in result.output
        assert "cell_kind = lstm" in result.output
        assert "[OK] Configuration is valid" in result.output

    @pytest.mark.unit
    def test_flag_overrides_file(self, runner, write_text):
        conf = write_text("run.conf", "seed = 1\n")
        result = runner.invoke(
            cli,
            ["--config", str(conf), "--seed", "9", "--workers", "2", "check-config"],
        )
        assert result.exit_code == 0
        assert "seed = 9" in result.output
        assert "workers = 2" in result.output

    @pytest.mark.unit
    def test_env_file(self, runner, write_text):
        env = write_text("local.env", "CW_HIDDEN_DIM=12\n")
        result = runner.invoke(cli, ["--env-file", str(env), "check-config"])
        assert result.exit_code == 0
        assert "hidden_dim = 12" in result.output

    @pytest.mark.unit
    def test_invalid_value(self, runner, write_text):
        conf = write_text("run.conf", "cell_kind = transformer\n")
        result = runner.invoke(cli, ["--config", str(conf), "check-config"])
        assert result.exit_code == EXIT_CONFIG
        assert "[ERROR] Configuration error: cell_kind" in result.output

    @pytest.mark.unit
    def test_missing_file(self, runner, tmp_path):
        absent = tmp_path / "absent.conf"
        result = runner.invoke(cli, ["--config", str(absent), "check-config"])
        assert result.exit_code == EXIT_CONFIG
        assert "Config file not found" in result.output


class TestExitCodes:
    """Domain errors map to distinct exit codes."""

    @pytest.mark.unit
    def test_missing_data_file(self, runner, write_text):
        conf = write_text("run.conf", "data = nowhere.csv\n")
        result = runner.invoke(cli, ["--config", str(conf), "train"])
        assert result.exit_code == EXIT_CONFIG
        assert "data: file not found" in result.output

    @pytest.mark.unit
    def test_data_error(self, runner, data_config, mocker):
        mocker.patch(
            "coherence_warning.pipeline.run_train",
            side_effect=DataError("unreadable row"),
        )
        result = runner.invoke(cli, ["--config", str(data_config), "train"])
        assert result.exit_code == EXIT_DATA
        assert "[ERROR] Data error: unreadable row" in result.output

    @pytest.mark.unit
    def test_numeric_error(self, runner, data_config, mocker):
        mocker.patch(
            "coherence_warning.pipeline.run_train",
            side_effect=NumericError("loss is NaN"),
        )
        result = runner.invoke(cli, ["--config", str(data_config), "train"])
        assert result.exit_code == EXIT_NUMERIC
        assert "[ERROR] Numeric error: loss is NaN" in result.output

    @pytest.mark.unit
    def test_missing_checkpoint(self, runner, data_config, tmp_path):
        out = str(tmp_path / "out")
        result = runner.invoke(
            cli, ["--config", str(data_config), "--out", out, "calibrate"]
        )
        assert result.exit_code == EXIT_CONFIG
        assert "checkpoint not found" in result.output


class TestCommands:
    """Command wiring."""

    @pytest.mark.unit
    def test_replicate_passes_options(self, runner, data_config, tmp_path, mocker):
        report = pd.DataFrame({"n_replications": [4]})
        run = mocker.patch(
            "coherence_warning.pipeline.run_replicate", return_value=report
        )
        out = tmp_path / "out"
        result = runner.invoke(
            cli,
            [
                "--config",
                str(data_config),
                "--seed",
                "5",
                "--out",
                str(out),
                "replicate",
                "--n",
                "4",
            ],
        )

        assert result.exit_code == 0
        assert "[OK] Aggregated 4 replication(s)" in result.output
        _, kwargs = run.call_args
        assert kwargs["n"] == 4
        assert kwargs["seed"] == 5

    @pytest.mark.unit
    def test_synth_writes_files(self, runner, write_text, tmp_path):
        conf = write_text(
            "synth.conf",
            "n_sites = 2\nsteps = 60\ninject = drought\ninject_onset = 30\n",
        )
        out = tmp_path / "out"
        result = runner.invoke(cli, ["--config", str(conf), "--out", str(out), "synth"])

        assert result.exit_code == 0
        assert "[OK] Series written" in result.output
        assert (out / "series.csv").exists()
        assert (out / "manifest.json").exists()

    @pytest.mark.unit
    def test_help_lists_commands(self, runner):
        result = runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        for command in (
            "check-config",
            "synth",
            "train",
            "calibrate",
            "detect",
            "evaluate",
            "replicate",
            "experiment",
        ):
            assert command in result.output
