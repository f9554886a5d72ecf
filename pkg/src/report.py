"""Report generation module for voxel-fm."""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

from src.utils.errors import ReportError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

RULE = "=" * 80
SUBRULE = "-" * 80


def _fmt(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class ReportGenerator:
    """Generator for the text and JSON artifacts written by each verb."""

    @staticmethod
    def generate_metric_report(payload: Mapping[str, Any]) -> str:
        """
        Generate a metric report from an ``evaluate`` payload.

        Args:
            payload: Dict with metric, point, ci_low, ci_high and optional
                comparisons / agreement blocks

        Returns:
            Formatted report as string
        """
        try:
            report_lines = [
                RULE,
                "METRIC REPORT",
                RULE,
                f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
                f"Task: {payload.get('task', 'n/a')}",
                f"Seed: {payload.get('seed')}",
                f"Config hash: {payload.get('config_hash')}",
                "",
                "POINT ESTIMATE",
                SUBRULE,
                f"{payload['metric']}: {_fmt(payload['point'])} "
                f"[{_fmt(payload['ci_low'])}, {_fmt(payload['ci_high'])}] "
                f"(n_boot={payload['n_boot']}, n={payload.get('n', 'n/a')})",
                "",
            ]

            comparisons = payload.get("comparisons") or {}
            if comparisons:
                report_lines.extend(["PAIRED PERMUTATION TESTS", SUBRULE])
                for name, result in comparisons.items():
                    report_lines.append(
                        f"  vs {name}: diff {_fmt(result['observed'])}, p = {_fmt(result['p_value'])} "
                        f"({result['n_perm']} permutations)"
                    )
                report_lines.append("")

            agreement = payload.get("agreement")
            if agreement:
                report_lines.extend([f"AGREEMENT AT THRESHOLD {payload.get('threshold')}", SUBRULE])
                for key in ("kappa", "sensitivity", "specificity", "accuracy", "prevalence"):
                    report_lines.append(f"  {key}: {_fmt(agreement[key])}")
                report_lines.append("")

            report_lines.append(RULE)
            return "\n".join(report_lines)
        except KeyError as e:
            raise ReportError(f"Failed to generate metric report: missing {e}")

    @staticmethod
    def generate_retrieval_report(results: Mapping[str, Mapping[str, Any]], ks: Sequence[int]) -> str:
        """Generate a per-subtype mAP / P@k table."""
        try:
            header = f"{'subtype':<20}{'mAP':>10}" + "".join(f"{'P@' + str(k):>10}" for k in ks) + f"{'queries':>10}"
            report_lines = [RULE, "RETRIEVAL REPORT", RULE, header, SUBRULE]
            for subtype, row in results.items():
                line = f"{subtype:<20}{_fmt(row['mAP']):>10}"
                line += "".join(f"{_fmt(row.get(f'P@{k}')):>10}" for k in ks)
                line += f"{row['n_queries']:>10}"
                report_lines.append(line)
            report_lines.append(RULE)
            return "\n".join(report_lines)
        except KeyError as e:
            raise ReportError(f"Failed to generate retrieval report: missing {e}")

    @staticmethod
    def generate_training_report(verb: str, epoch_losses: Sequence[float], duration_seconds: float = 0.0) -> str:
        """Summarise a pretraining run's loss curve."""
        report_lines = [
            RULE,
            f"{verb.upper()} TRAINING SUMMARY",
            RULE,
            f"Epochs: {len(epoch_losses)}",
            f"First epoch loss: {_fmt(epoch_losses[0]) if epoch_losses else 'n/a'}",
            f"Final epoch loss: {_fmt(epoch_losses[-1]) if epoch_losses else 'n/a'}",
            f"Duration: {duration_seconds:.2f} seconds",
            RULE,
        ]
        return "\n".join(report_lines)

    @staticmethod
    def generate_prevalence_report(observed: Mapping[str, float], implied: Mapping[str, float], n: int) -> str:
        """Observed versus closed-form label prevalence of a phantom dataset."""
        report_lines = [RULE, "PHANTOM LABEL PREVALENCE", RULE, f"Volumes: {n:,}", "",
                        f"{'task':<20}{'observed':>12}{'implied':>12}", SUBRULE]
        for task in observed:
            report_lines.append(f"{task:<20}{_fmt(observed[task]):>12}{_fmt(implied.get(task)):>12}")
        report_lines.append(RULE)
        return "\n".join(report_lines)

    @staticmethod
    def export_report(report: str, path: Union[str, Path]) -> Path:
        """
        Export a text report to file.

        Raises:
            ReportError: If export fails
        """
        try:
            output_path = Path(path)
            output_path.parent.mkdir(parents=True, exist_ok=True)
            with open(output_path, "w") as f:
                f.write(report + "\n")
            logger.info(f"Report exported to {output_path}")
            return output_path
        except OSError as e:
            raise ReportError(f"Failed to export report: {e}")

    @staticmethod
    def write_json(
        payload: Mapping[str, Any],
        path: Union[str, Path],
        seed: Optional[int] = None,
        config_hash: Optional[str] = None,
    ) -> Path:
        """
        Write a JSON artifact with the run seed and config hash embedded.

        Keys are sorted so identical payloads produce identical bytes.

        Raises:
            ReportError: If the payload is not serialisable or the write fails
        """
        document: Dict[str, Any] = dict(payload)
        if seed is not None:
            document["seed"] = seed
        if config_hash is not None:
            document["config_hash"] = config_hash
        try:
            output_path = Path(path)
            output_path.parent.mkdir(parents=True, exist_ok=True)
            text = json.dumps(document, indent=2, sort_keys=True, allow_nan=False)
            with open(output_path, "w") as f:
                f.write(text + "\n")
            return output_path
        except (TypeError, ValueError, OSError) as e:
            raise ReportError(f"Failed to write JSON artifact {path}: {e}")


def list_artifacts(paths: Sequence[Union[str, Path]], root: Union[str, Path]) -> List[str]:
    """Artifact paths relative to ``root`` where possible."""
    base = Path(root).resolve()
    out = []
    for p in paths:
        resolved = Path(p).resolve()
        try:
            out.append(str(resolved.relative_to(base)))
        except ValueError:
            out.append(str(resolved))
    return sorted(set(out))
