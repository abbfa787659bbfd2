"""Tests for runtime settings."""

import logging
from unittest.mock import patch

import pytest

from med_nca import settings
from med_nca.errors import ConfigError


class TestWorkerCount:
    """Tests for worker_count."""

    def test_explicit(self) -> None:
        """Test that MEDNCA_THREADS is honoured."""
        with patch.dict("os.environ", {"MEDNCA_THREADS": "1"}):
            assert settings.worker_count() == 1

    def test_default_is_cpu_count(self) -> None:
        """Test the fallback when MEDNCA_THREADS is unset."""
        with patch.dict("os.environ", {}, clear=True), patch("os.cpu_count", return_value=6):
            assert settings.worker_count() == 6

    def test_not_an_integer(self) -> None:
        """Test that a non-numeric thread cap is rejected."""
        with patch.dict("os.environ", {"MEDNCA_THREADS": "many"}):
            with pytest.raises(ConfigError, match="must be an integer"):
                settings.worker_count()

    def test_below_one(self) -> None:
        with patch.dict("os.environ", {"MEDNCA_THREADS": "0"}):
            with pytest.raises(ConfigError, match=">= 1"):
                settings.worker_count()


class TestLogLevel:
    """Tests for log_level."""

    def test_env(self) -> None:
        with patch.dict("os.environ", {"MEDNCA_LOG_LEVEL": "debug"}):
            assert settings.log_level() == logging.DEBUG

    def test_override_wins(self) -> None:
        """Test that --log-level beats the environment."""
        with patch.dict("os.environ", {"MEDNCA_LOG_LEVEL": "DEBUG"}):
            assert settings.log_level("warning") == logging.WARNING

    def test_unknown(self) -> None:
        with pytest.raises(ConfigError, match="Unknown log level"):
            settings.log_level("LOUD")


class TestConfigFile:
    """Tests for read_config_file and merge_settings."""

    def test_parse(self, tmp_path) -> None:
        """Test comments, blank lines and whitespace around keys."""
        path = tmp_path / "run.cfg"
        path.write_text("# header\n\n epochs = 5  # short run\nlr=0.01\n")
        assert settings.read_config_file(path) == {"epochs": "5", "lr": "0.01"}

    def test_missing_equals(self, tmp_path) -> None:
        path = tmp_path / "run.cfg"
        path.write_text("epochs 5\n")
        with pytest.raises(ConfigError, match="run.cfg:1"):
            settings.read_config_file(path)

    def test_missing_file(self, tmp_path) -> None:
        with pytest.raises(ConfigError, match="config file not found"):
            settings.read_config_file(tmp_path / "nope.cfg")

    def test_later_layers_win(self) -> None:
        defaults = {"epochs": 200, "lr": 1e-3, "name": "run"}
        merged = settings.merge_settings(defaults, {"epochs": "10"}, {"epochs": 3, "lr": None})
        assert merged == {"epochs": 3, "lr": 1e-3, "name": "run"}

    def test_coercion(self) -> None:
        merged = settings.merge_settings({"epochs": 1, "lr": 0.1, "verbose": False}, {"lr": "0.5", "verbose": "yes"})
        assert merged["lr"] == 0.5
        assert merged["verbose"] is True

    def test_bad_value(self) -> None:
        with pytest.raises(ConfigError, match="bad value for epochs"):
            settings.merge_settings({"epochs": 1}, {"epochs": "ten"})

    def test_unknown_key(self) -> None:
        with pytest.raises(ConfigError, match="Unknown config key: momentum"):
            settings.merge_settings({"epochs": 1}, {"momentum": "0.9"})


class TestSiteDefaults:
    """Tests for the site-config fallbacks."""

    def test_split_ratios(self) -> None:
        assert sum(settings.DATASET_SPLITS.values()) == pytest.approx(1.0)

    def test_sweep_grids_cover_every_kind(self) -> None:
        from med_nca.perturb import KINDS

        assert set(settings.SWEEP_GRIDS) == set(KINDS)
