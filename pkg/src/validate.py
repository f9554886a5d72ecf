"""Manifest validation for voxel-fm.

Checks are collected into a ``ValidationReport`` rather than raised one by
one, so a broken manifest reports every problem at once.
"""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Sequence

from src.utils.constants import SPLITS
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

REQUIRED_RECORD_FIELDS = ("volume_id", "path", "split", "labels", "group_key")


@dataclass
class ValidationResult:
    """Result of validating a single record field."""

    field_name: str
    value: Any
    is_valid: bool
    errors: List[str] = field(default_factory=list)


@dataclass
class ValidationReport:
    """Report from validating a full manifest."""

    total_records: int
    valid_records: int = 0
    invalid_records: int = 0
    errors: List[str] = field(default_factory=list)
    errors_by_field: Dict[str, int] = field(default_factory=dict)
    max_listed_errors: int = 20

    @property
    def is_valid(self) -> bool:
        return not self.errors

    def add_error(self, field_name: str, message: str) -> None:
        """Record one error against a field."""
        self.errors.append(message)
        self.errors_by_field[field_name] = self.errors_by_field.get(field_name, 0) + 1

    def summary(self) -> str:
        """One-paragraph summary listing the first errors."""
        head = self.errors[: self.max_listed_errors]
        more = len(self.errors) - len(head)
        lines = [f"{len(self.errors)} manifest error(s):"] + [f"  - {e}" for e in head]
        if more > 0:
            lines.append(f"  ... and {more} more")
        return "\n".join(lines)

    def to_dict(self) -> Dict[str, Any]:
        """Convert report to dictionary."""
        return {
            "total_records": self.total_records,
            "valid_records": self.valid_records,
            "invalid_records": self.invalid_records,
            "errors_by_field": self.errors_by_field,
            "errors": self.errors,
        }


class ManifestValidator:
    """Field-level and cross-record checks for manifest records."""

    @staticmethod
    def validate_required(record: Mapping[str, Any], field_name: str) -> ValidationResult:
        """Validate that a required field is present and not empty."""
        value = record.get(field_name)
        result = ValidationResult(field_name, value, is_valid=True)
        if value is None or (isinstance(value, str) and value.strip() == ""):
            result.is_valid = False
            result.errors.append(f"Required field '{field_name}' is null or empty")
        return result

    @staticmethod
    def validate_split(value: Any) -> ValidationResult:
        """Validate the split assignment."""
        result = ValidationResult("split", value, is_valid=True)
        if value not in SPLITS:
            result.is_valid = False
            result.errors.append(f"Field 'split' value '{value}' not in allowed values: {list(SPLITS)}")
        return result

    @staticmethod
    def validate_labels(value: Any, tasks: Sequence[str]) -> ValidationResult:
        """Validate that labels cover exactly the declared tasks with binary values."""
        result = ValidationResult("labels", value, is_valid=True)
        if not isinstance(value, Mapping):
            result.is_valid = False
            result.errors.append("Field 'labels' must be a mapping of task -> 0/1")
            return result

        missing = [t for t in tasks if t not in value]
        extra = [t for t in value if t not in tasks]
        if missing:
            result.is_valid = False
            result.errors.append(f"Field 'labels' missing label for declared task(s) {missing}")
        if extra:
            result.is_valid = False
            result.errors.append(f"Field 'labels' has undeclared task(s) {extra}")
        for task, label in value.items():
            if isinstance(label, bool) or label not in (0, 1):
                result.is_valid = False
                result.errors.append(f"Field 'labels' task '{task}' has non-binary value {label!r}")
        return result

    @staticmethod
    def validate_record(record: Mapping[str, Any], tasks: Sequence[str]) -> ValidationResult:
        """
        Validate a single record against the manifest schema.

        Args:
            record: Raw record dictionary
            tasks: Declared task names

        Returns:
            ValidationResult combining all field validations
        """
        row_result = ValidationResult("record", record.get("volume_id"), is_valid=True)

        for field_name in REQUIRED_RECORD_FIELDS:
            required = ManifestValidator.validate_required(record, field_name)
            if not required.is_valid:
                row_result.is_valid = False
                row_result.errors.extend(required.errors)
        if not row_result.is_valid:
            return row_result

        for check in (
            ManifestValidator.validate_split(record["split"]),
            ManifestValidator.validate_labels(record["labels"], tasks),
        ):
            if not check.is_valid:
                row_result.is_valid = False
                row_result.errors.extend(check.errors)

        return row_result

    @staticmethod
    def validate_records(
        records: Sequence[Mapping[str, Any]], tasks: Sequence[str]
    ) -> ValidationReport:
        """
        Validate every record plus id uniqueness and patient-level split hygiene.

        Args:
            records: Raw record dictionaries
            tasks: Declared task names

        Returns:
            ValidationReport with every problem found
        """
        report = ValidationReport(total_records=len(records))

        if len(set(tasks)) != len(tasks):
            report.add_error("tasks", f"Duplicate task names in header: {list(tasks)}")

        seen_ids: Dict[str, int] = {}
        group_splits: Dict[str, set] = defaultdict(set)

        for line_no, record in enumerate(records, 1):
            result = ManifestValidator.validate_record(record, tasks)
            if result.is_valid:
                report.valid_records += 1
            else:
                report.invalid_records += 1
                for error in result.errors:
                    field_name = error.split("'")[1] if "'" in error else "record"
                    report.add_error(field_name, f"record {line_no}: {error}")

            volume_id = record.get("volume_id")
            if volume_id is not None:
                if volume_id in seen_ids:
                    report.add_error(
                        "volume_id",
                        f"record {line_no}: duplicate volume_id '{volume_id}' "
                        f"(first seen at record {seen_ids[volume_id]})",
                    )
                else:
                    seen_ids[volume_id] = line_no

            if record.get("group_key") and record.get("split") in SPLITS:
                group_splits[record["group_key"]].add(record["split"])

        for group_key, splits in sorted(group_splits.items()):
            if len(splits) > 1:
                report.add_error(
                    "group_key",
                    f"group_key '{group_key}' spans splits {sorted(splits)} (patient-level leakage)",
                )

        logger.debug(
            f"Manifest validation: {report.valid_records}/{report.total_records} records valid, "
            f"{len(report.errors)} error(s)"
        )
        return report
