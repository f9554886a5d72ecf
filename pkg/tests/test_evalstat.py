"""Tests for the evalstat module."""

import numpy as np
import pandas as pd
import pytest

from src.evalstat import (
    ScoredSet,
    agreement_stats,
    auc,
    average_precision,
    bootstrap_ci,
    few_shot_interval,
    label_sensitivity_table,
    macro_auc,
    metric_by_name,
    paired_permutation_test,
)
from src.utils.errors import MetricError


@pytest.fixture
def hand_set():
    """Four volumes with AUC 0.75."""
    return ScoredSet(["a", "b", "c", "d"], np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1]))


@pytest.fixture
def separable_set():
    """Twenty volumes whose positives all outscore the negatives."""
    labels = np.array([0] * 10 + [1] * 10)
    scores = np.linspace(0.0, 1.0, 20)
    return ScoredSet([f"v{i:02d}" for i in range(20)], scores, labels)


class TestScoredSet:
    """Test ScoredSet validation."""

    def test_length_mismatch(self):
        """Test parallel arrays must agree in length."""
        with pytest.raises(MetricError):
            ScoredSet(["a"], np.array([0.1, 0.2]), np.array([0]))

    def test_non_binary_labels(self):
        """Test labels must be 0/1."""
        with pytest.raises(MetricError):
            ScoredSet(["a"], np.array([0.1]), np.array([2]))

    def test_from_frame_missing_label(self):
        """Test scored volumes without a reference label are rejected."""
        frame = pd.DataFrame({"volume_id": ["a", "z"], "score_pos": [0.1, 0.2]})
        with pytest.raises(MetricError, match="'z'"):
            ScoredSet.from_frame(frame, {"a": 1})


class TestMetrics:
    """Test point metrics."""

    def test_auc_hand_example(self, hand_set):
        """Test the four-volume example gives 0.75."""
        assert auc(hand_set) == pytest.approx(0.75)

    def test_auc_ties_count_half(self):
        """Test constant scores give 0.5."""
        s = ScoredSet(["a", "b", "c"], np.array([0.3, 0.3, 0.3]), np.array([0, 1, 1]))
        assert auc(s) == pytest.approx(0.5)

    def test_auc_single_class(self):
        """Test AUC is undefined without negatives."""
        with pytest.raises(MetricError, match="both classes"):
            auc(ScoredSet(["a", "b"], np.array([0.1, 0.2]), np.array([1, 1])))

    def test_average_precision(self):
        """Test positives at ranks 1, 3 and 5 give (1 + 2/3 + 3/5) / 3."""
        s = ScoredSet(list("abcde"), np.array([0.9, 0.8, 0.7, 0.6, 0.5]), np.array([1, 0, 1, 0, 1]))
        assert average_precision(s) == pytest.approx(0.755556, abs=1e-6)

    def test_metric_by_name(self):
        """Test metric lookup and unknown names."""
        assert metric_by_name("auc") is auc
        with pytest.raises(MetricError):
            metric_by_name("f1")

    def test_macro_auc_unweighted(self, hand_set, separable_set):
        """Test macro-AUC is the plain mean of task AUCs."""
        assert macro_auc({"x": hand_set, "y": separable_set}) == pytest.approx(0.875)


class TestBootstrap:
    """Test percentile bootstrap intervals."""

    def test_perfect_separation(self, separable_set):
        """Test a perfectly separating scorer has interval [1, 1]."""
        report = bootstrap_ci(auc, separable_set, n_boot=50, seed=0)
        assert (report.point, report.ci_low, report.ci_high) == (1.0, 1.0, 1.0)

    def test_seeded(self, hand_set):
        """Test intervals repeat for one seed."""
        a = bootstrap_ci(auc, hand_set, n_boot=30, seed=4)
        b = bootstrap_ci(auc, hand_set, n_boot=30, seed=4)
        assert a.to_dict() == b.to_dict()

    def test_interval_ordered(self, hand_set):
        """Test the lower bound never exceeds the upper bound."""
        report = bootstrap_ci(average_precision, hand_set, n_boot=40, seed=1)
        assert 0.0 <= report.ci_low <= report.ci_high <= 1.0

    def test_rejects_zero_resamples(self, hand_set):
        """Test n_boot must be positive."""
        with pytest.raises(MetricError):
            bootstrap_ci(auc, hand_set, n_boot=0)


class TestPermutation:
    """Test the paired permutation test."""

    def test_identical_models(self, hand_set):
        """Test identical scorers give p = 1."""
        result = paired_permutation_test(hand_set, hand_set, auc, n_perm=99, seed=0)
        assert result.observed == 0.0
        assert result.p_value == 1.0

    def test_p_value_bounds(self, separable_set):
        """Test p lies in [1 / (n + 1), 1] and is small for a clear winner."""
        worse = separable_set.with_scores(separable_set.scores[::-1].copy())
        result = paired_permutation_test(separable_set, worse, auc, n_perm=199, seed=0)
        assert result.observed == pytest.approx(1.0)
        assert 1 / 200 <= result.p_value < 0.05

    def test_misaligned(self, hand_set, separable_set):
        """Test sets over different volumes are rejected."""
        with pytest.raises(MetricError, match="aligned"):
            paired_permutation_test(hand_set, separable_set, auc)

    def test_clear_winner_on_two_hundred_volumes(self):
        """Test a perfect scorer beats its reversal with p <= 0.01 and a degenerate [1, 1] interval."""
        labels = np.array([0, 1] * 100)
        scores = labels + np.random.default_rng(0).uniform(0.0, 0.9, size=200)
        perfect = ScoredSet([f"v{i:03d}" for i in range(200)], scores, labels)
        reversed_set = perfect.with_scores(-scores)

        result = paired_permutation_test(perfect, reversed_set, auc, n_perm=1000, seed=0)
        assert result.observed == pytest.approx(1.0)
        assert result.p_value <= 0.01

        report = bootstrap_ci(auc, perfect, n_boot=200, seed=0)
        assert (report.point, report.ci_low, report.ci_high) == (1.0, 1.0, 1.0)


class TestAgreement:
    """Test label agreement statistics."""

    def test_kappa_example(self):
        """Test tp=4, fn=1, fp=2, tn=3 gives kappa 0.4."""
        ref = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
        pred = [1, 1, 1, 1, 0, 1, 1, 0, 0, 0]
        result = agreement_stats(pred, ref)
        assert (result.tp, result.fn, result.fp, result.tn) == (4, 1, 2, 3)
        assert result.kappa == pytest.approx(0.4)
        assert result.sensitivity == pytest.approx(0.8)
        assert result.specificity == pytest.approx(0.6)
        assert result.accuracy == pytest.approx(0.7)
        assert result.prevalence == pytest.approx(0.5)

    def test_undefined_ratios(self):
        """Test all-negative references leave sensitivity and kappa undefined."""
        result = agreement_stats([0, 0], [0, 0])
        assert result.sensitivity is None
        assert result.kappa is None
        assert result.specificity == 1.0

    def test_length_mismatch(self):
        """Test unequal inputs are rejected."""
        with pytest.raises(MetricError):
            agreement_stats([0, 1], [0])

    def test_sensitivity_table(self):
        """Test one agreement row per task after joining on volume_id."""
        pred = pd.DataFrame({"volume_id": ["a", "b", "c"], "bleed": [1, 0, 1]})
        ref = pd.DataFrame({"volume_id": ["c", "b", "a"], "bleed": [1, 0, 0]})
        table = label_sensitivity_table(pred, ref, ["bleed"])
        row = table.iloc[0]
        assert row["task"] == "bleed"
        assert (row["tp"], row["fp"], row["tn"], row["fn"]) == (1, 1, 1, 0)


class TestFewShotInterval:
    """Test the Student-t interval over repeats."""

    def test_single_value(self):
        """Test one repeat collapses the interval."""
        assert few_shot_interval([0.7]) == {"mean": 0.7, "ci_low": 0.7, "ci_high": 0.7, "n": 1}

    def test_symmetric(self):
        """Test the interval is centred on the mean."""
        out = few_shot_interval([0.6, 0.7, 0.8])
        assert out["mean"] == pytest.approx(0.7)
        assert out["ci_high"] - out["mean"] == pytest.approx(out["mean"] - out["ci_low"])
        assert out["ci_low"] < 0.6

    def test_empty(self):
        """Test no repeats is an error."""
        with pytest.raises(MetricError):
            few_shot_interval([])
