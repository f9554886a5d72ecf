"""Tests for the shared helpers."""

import json
import logging
import logging.handlers
import sys

import numpy as np
import pytest
import torch

from src.utils.decorators import timer
from src.utils.logger import TrainingLog, set_package_level, setup_logger
from src.utils.seeding import derive_rng, torch_seed


class TestDeriveRng:
    """Test counter-based generator streams."""

    def test_same_keys_same_stream(self):
        """Test a (seed, keys) pair always gives the same draws."""
        assert np.array_equal(derive_rng(7, "crop", 3).random(5), derive_rng(7, "crop", 3).random(5))

    def test_keys_separate_streams(self):
        """Test the seed and each key change the stream."""
        base = derive_rng(7, "crop", 3).random(5)
        for other in (derive_rng(8, "crop", 3), derive_rng(7, "flip", 3), derive_rng(7, "crop", 4)):
            assert not np.array_equal(base, other.random(5))

    def test_negative_key(self):
        """Test negative integer keys are rejected."""
        with pytest.raises(ValueError, match="non-negative"):
            derive_rng(0, -1)


class TestTorchSeed:
    """Test the forked torch generator."""

    def test_repeatable_and_isolated(self):
        """Test seeded blocks repeat and leave the global stream untouched."""
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        with torch_seed(5):
            a = torch.rand(3)
        with torch_seed(5):
            b = torch.rand(3)
        assert torch.equal(a, b)
        assert torch.equal(torch.rand(3), expected)


class TestLogger:
    """Test logger setup."""

    def test_file_handler(self, tmp_path):
        """Test a log directory adds a rotating file handler."""
        logger = setup_logger("src.tests.file_logger", log_dir=str(tmp_path / "logs"))
        assert any(isinstance(h, logging.handlers.RotatingFileHandler) for h in logger.handlers)
        assert (tmp_path / "logs").is_dir()

    def test_console_on_stderr(self):
        """Test console records go to stderr."""
        logger = setup_logger("src.tests.stderr_logger")
        assert [h.stream for h in logger.handlers] == [sys.stderr]

    def test_no_duplicate_handlers(self):
        """Test repeated setup reuses the configured handlers."""
        first = setup_logger("src.tests.repeat_logger")
        count = len(first.handlers)
        assert len(setup_logger("src.tests.repeat_logger").handlers) == count

    def test_invalid_level(self):
        """Test unknown levels are rejected."""
        with pytest.raises(ValueError, match="Invalid log level"):
            setup_logger("src.tests.bad_level", log_level="LOUD")

    def test_package_level(self):
        """Test the package level reaches existing src loggers."""
        logger = setup_logger("src.tests.level_logger")
        set_package_level("ERROR")
        try:
            assert logger.level == logging.ERROR
        finally:
            set_package_level("INFO")


class TestTimer:
    """Test the timing decorator."""

    def test_passes_through(self, caplog):
        """Test the wrapped result and name survive and the duration is logged."""

        @timer
        def add(a, b):
            return a + b

        with caplog.at_level(logging.INFO, logger=__name__):
            assert add(2, 3) == 5
        assert add.__name__ == "add"
        assert "add finished in" in caplog.text

    def test_failure_reraised(self, caplog):
        """Test errors propagate unchanged after the failure is logged."""

        @timer
        def boom():
            raise KeyError("x")

        with caplog.at_level(logging.WARNING, logger=__name__):
            with pytest.raises(KeyError):
                boom()
        assert "boom failed after" in caplog.text


class TestTrainingLog:
    """Test the line-delimited training log."""

    def test_one_line_per_record(self, tmp_path):
        """Test records are written as JSON lines."""
        path = tmp_path / "run" / "train_log.jsonl"
        with TrainingLog(path) as log:
            log.write({"step": 1, "loss": 0.5})
            log.write({"step": 2, "loss": 0.25})
        assert log.n_records == 2
        lines = path.read_text().splitlines()
        assert [json.loads(line)["step"] for line in lines] == [1, 2]

    def test_closed_log(self, tmp_path):
        """Test writing outside the context fails."""
        with pytest.raises(RuntimeError, match="not open"):
            TrainingLog(tmp_path / "log.jsonl").write({"step": 1})

    def test_non_finite_rejected(self, tmp_path):
        """Test NaN losses are not written as invalid JSON."""
        with TrainingLog(tmp_path / "log.jsonl") as log:
            with pytest.raises(ValueError):
                log.write({"loss": float("nan")})
