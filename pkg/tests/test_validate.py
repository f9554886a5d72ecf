"""Tests for the validate module."""

import pytest

from src.validate import ManifestValidator, ValidationReport, ValidationResult


def _record(**overrides):
    record = {
        "volume_id": "vol_001",
        "path": "volumes/vol_001",
        "split": "train",
        "labels": {"bright_lesion": 1},
        "group_key": "patient_001",
    }
    record.update(overrides)
    return record


class TestValidationResult:
    """Test ValidationResult class."""

    def test_validation_result_valid(self):
        """Test creating a valid result."""
        result = ValidationResult("split", "train", is_valid=True)
        assert result.is_valid
        assert result.errors == []

    def test_validation_result_invalid(self):
        """Test creating an invalid result."""
        result = ValidationResult("split", "bogus", is_valid=False)
        result.errors.append("Test error")
        assert not result.is_valid
        assert len(result.errors) == 1


class TestValidationReport:
    """Test ValidationReport class."""

    def test_add_error_counts_by_field(self):
        """Test errors are tallied per field."""
        report = ValidationReport(total_records=2)
        report.add_error("split", "record 1: bad split")
        report.add_error("split", "record 2: bad split")
        assert not report.is_valid
        assert report.to_dict()["errors_by_field"] == {"split": 2}

    def test_summary_truncates(self):
        """Test the summary lists a bounded number of errors."""
        report = ValidationReport(total_records=30, max_listed_errors=3)
        for i in range(5):
            report.add_error("labels", f"error {i}")
        summary = report.summary()
        assert "5 manifest error(s)" in summary
        assert "error 2" in summary
        assert "error 3" not in summary
        assert "and 2 more" in summary


class TestValidateRequired:
    """Test required field validation."""

    def test_required_valid(self):
        """Test valid required field."""
        assert ManifestValidator.validate_required(_record(), "volume_id").is_valid

    def test_required_null(self):
        """Test null required field."""
        result = ManifestValidator.validate_required(_record(group_key=None), "group_key")
        assert not result.is_valid
        assert len(result.errors) > 0

    def test_required_empty_string(self):
        """Test empty string required field."""
        assert not ManifestValidator.validate_required(_record(path="  "), "path").is_valid


class TestValidateSplit:
    """Test split validation."""

    @pytest.mark.parametrize("split", ["train", "val", "test"])
    def test_known_splits(self, split):
        """Test every declared split is accepted."""
        assert ManifestValidator.validate_split(split).is_valid

    def test_unknown_split(self):
        """Test an undeclared split is rejected."""
        assert not ManifestValidator.validate_split("holdout").is_valid


class TestValidateLabels:
    """Test label validation."""

    def test_labels_valid(self):
        """Test labels covering every task with 0/1 values."""
        assert ManifestValidator.validate_labels({"a": 0, "b": 1}, ["a", "b"]).is_valid

    def test_labels_missing_task(self):
        """Test a missing task label is reported."""
        result = ManifestValidator.validate_labels({"a": 0}, ["a", "b"])
        assert not result.is_valid
        assert "missing" in result.errors[0]

    def test_labels_extra_task(self):
        """Test an undeclared task label is reported."""
        assert not ManifestValidator.validate_labels({"a": 0, "z": 1}, ["a"]).is_valid

    @pytest.mark.parametrize("value", [2, -1, 0.5, True, "1"])
    def test_labels_non_binary(self, value):
        """Test values other than integer 0/1 are rejected."""
        assert not ManifestValidator.validate_labels({"a": value}, ["a"]).is_valid

    def test_labels_not_a_mapping(self):
        """Test a list of labels is rejected."""
        assert not ManifestValidator.validate_labels([1], ["a"]).is_valid


class TestValidateRecords:
    """Test whole-manifest validation."""

    def test_clean_records(self):
        """Test a clean manifest produces no errors."""
        records = [
            _record(),
            _record(volume_id="vol_002", group_key="patient_002", split="test", labels={"bright_lesion": 0}),
        ]
        report = ManifestValidator.validate_records(records, ["bright_lesion"])
        assert report.is_valid
        assert report.valid_records == 2

    def test_collects_every_problem(self):
        """Test all problems are reported at once."""
        records = [
            _record(split="holdout"),
            _record(labels={"bright_lesion": 3}),
            _record(volume_id="vol_009", split="test"),
        ]
        report = ManifestValidator.validate_records(records, ["bright_lesion"])
        messages = "\n".join(report.errors)
        assert report.invalid_records == 2
        assert "holdout" in messages
        assert "non-binary" in messages
        assert "duplicate volume_id 'vol_001'" in messages
        assert "patient-level leakage" in messages

    def test_duplicate_task_names(self):
        """Test a header repeating a task is reported."""
        report = ManifestValidator.validate_records([], ["a", "a"])
        assert not report.is_valid
