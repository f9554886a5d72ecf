"""Classification metrics, resampling statistics and label agreement."""

import math
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import confusion_matrix

from src.utils.constants import CI_LEVEL, DEFAULT_N_BOOT, DEFAULT_N_PERM, MAX_BOOTSTRAP_REDRAWS
from src.utils.errors import MetricError
from src.utils.logger import setup_logger
from src.utils.seeding import derive_rng

logger = setup_logger(__name__)

# Permuted statistics within this distance of |observed| count as ties
PERMUTATION_TOLERANCE = 1e-12


@dataclass
class ScoredSet:
    """Parallel volume ids, positive-class scores and binary labels."""

    volume_ids: List[str]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.volume_ids = [str(v) for v in self.volume_ids]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.volume_ids) == len(self.scores) == len(self.labels)):
            raise MetricError(
                f"ScoredSet lengths differ: {len(self.volume_ids)} ids, {len(self.scores)} scores, "
                f"{len(self.labels)} labels"
            )
        if not np.isin(self.labels, (0, 1)).all():
            raise MetricError("ScoredSet labels must be 0/1")
        if not np.isfinite(self.scores).all():
            raise MetricError("ScoredSet scores must be finite")

    def __len__(self) -> int:
        return len(self.volume_ids)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos

    def subset(self, indices: Sequence[int]) -> "ScoredSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ScoredSet([self.volume_ids[i] for i in idx], self.scores[idx], self.labels[idx])

    def with_scores(self, scores: np.ndarray) -> "ScoredSet":
        return ScoredSet(list(self.volume_ids), scores, self.labels.copy())

    @classmethod
    def from_frame(cls, scores: pd.DataFrame, labels: Mapping[str, int]) -> "ScoredSet":
        """Join a {volume_id, score_pos} frame with reference labels by volume_id."""
        missing = [v for v in scores["volume_id"] if v not in labels]
        if missing:
            raise MetricError(f"No reference label for {len(missing)} scored volume(s), e.g. '{missing[0]}'")
        ids = [str(v) for v in scores["volume_id"]]
        return cls(ids, scores["score_pos"].to_numpy(), np.array([labels[v] for v in ids]))


Metric = Callable[[ScoredSet], float]


def auc(s: ScoredSet) -> float:
    """Mann-Whitney AUC; tied pairs count one half."""
    if s.n_pos == 0 or s.n_neg == 0:
        raise MetricError(f"AUC needs both classes, got {s.n_pos} positive and {s.n_neg} negative")
    ranks = stats.rankdata(s.scores)
    u = ranks[s.labels == 1].sum() - s.n_pos * (s.n_pos + 1) / 2.0
    return float(u / (s.n_pos * s.n_neg))


def average_precision(s: ScoredSet) -> float:
    """
    Sum of precision at each positive over the descending-score ranking.

    Tied scores are ordered by ascending volume_id.
    """
    if s.n_pos == 0:
        raise MetricError("Average precision needs at least one positive")
    order = np.lexsort((np.array(s.volume_ids), -s.scores))
    hits = s.labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].sum() / s.n_pos)


METRICS: Dict[str, Metric] = {"auc": auc, "ap": average_precision}


def metric_by_name(name: str) -> Metric:
    if name not in METRICS:
        raise MetricError(f"Unknown metric '{name}'. Must be one of {sorted(METRICS)}")
    return METRICS[name]


@dataclass
class MetricReport:
    """Point estimate with a percentile bootstrap interval."""

    metric: str
    point: float
    ci_low: float
    ci_high: float
    n_boot: int
    seed: int
    n_redraws: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def bootstrap_ci(
    metric: Metric,
    s: ScoredSet,
    n_boot: int = DEFAULT_N_BOOT,
    seed: int = 0,
    level: float = CI_LEVEL,
) -> MetricReport:
    """
    Percentile bootstrap interval of a metric.

    Resample ``b`` draws from its own stream (seed, b). Resamples on which
    the metric is undefined (single class) are redrawn.

    Raises:
        MetricError: If the metric is undefined on the full set or on every resample
    """
    if n_boot < 1:
        raise MetricError(f"n_boot must be >= 1, got {n_boot}")
    point = metric(s)
    n = len(s)
    values = []
    redraws = 0
    for b in range(n_boot):
        rng = derive_rng(seed, "bootstrap", b)
        for _ in range(MAX_BOOTSTRAP_REDRAWS):
            try:
                values.append(metric(s.subset(rng.integers(0, n, size=n))))
                break
            except MetricError:
                redraws += 1

    if not values:
        raise MetricError(f"{getattr(metric, '__name__', 'metric')} undefined on every bootstrap resample")
    if redraws:
        logger.warning(f"Bootstrap redrew {redraws} degenerate resample(s) over {n_boot} resamples")

    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return MetricReport(
        metric=getattr(metric, "__name__", "metric"),
        point=point,
        ci_low=float(low),
        ci_high=float(high),
        n_boot=n_boot,
        seed=seed,
        n_redraws=redraws,
    )


@dataclass
class PermutationResult:
    observed: float
    p_value: float
    n_perm: int
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def paired_permutation_test(
    a: ScoredSet,
    b: ScoredSet,
    metric: Metric,
    n_perm: int = DEFAULT_N_PERM,
    seed: int = 0,
) -> PermutationResult:
    """
    Two-sided paired permutation test of metric(a) - metric(b).

    Each permutation swaps the two models' scores per volume with
    probability one half; p = (1 + #{|perm| >= |observed|}) / (n_perm + 1).

    Raises:
        MetricError: If the sets are not aligned by volume_id and label
    """
    if a.volume_ids != b.volume_ids or not np.array_equal(a.labels, b.labels):
        raise MetricError("Permutation test inputs must be aligned by volume_id with identical labels")
    if n_perm < 1:
        raise MetricError(f"n_perm must be >= 1, got {n_perm}")

    observed = metric(a) - metric(b)
    threshold = abs(observed) - PERMUTATION_TOLERANCE
    extreme = 0
    for k in range(n_perm):
        swap = derive_rng(seed, "permutation", k).random(len(a)) < 0.5
        perm_a = a.with_scores(np.where(swap, b.scores, a.scores))
        perm_b = b.with_scores(np.where(swap, a.scores, b.scores))
        if abs(metric(perm_a) - metric(perm_b)) >= threshold:
            extreme += 1
    return PermutationResult(
        observed=float(observed), p_value=(1 + extreme) / (n_perm + 1), n_perm=n_perm, seed=seed
    )


@dataclass
class AgreementStats:
    """Confusion-matrix agreement between predicted and reference labels."""

    kappa: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: float
    prevalence: float
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def agreement_stats(pred: Sequence[int], ref: Sequence[int]) -> AgreementStats:
    """Cohen's kappa, sensitivity, specificity, accuracy and reference prevalence."""
    if len(pred) != len(ref):
        raise MetricError(f"pred and ref lengths differ: {len(pred)} vs {len(ref)}")
    if len(ref) == 0:
        raise MetricError("agreement_stats needs at least one pair")
    tn, fp, fn, tp = (int(x) for x in confusion_matrix(list(ref), list(pred), labels=[0, 1]).ravel())
    n = tn + fp + fn + tp
    p_o = (tp + tn) / n
    p_e = ((tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)) / (n * n)
    kappa = None if math.isclose(p_e, 1.0) else (p_o - p_e) / (1.0 - p_e)
    return AgreementStats(
        kappa=kappa,
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        accuracy=p_o,
        prevalence=(tp + fn) / n,
        tp=tp,
        fn=fn,
        fp=fp,
        tn=tn,
    )


def macro_auc(sets: Mapping[str, ScoredSet]) -> float:
    """Unweighted mean of per-task AUCs."""
    if not sets:
        raise MetricError("macro_auc needs at least one task")
    return float(np.mean([auc(s) for s in sets.values()]))


def label_sensitivity_table(pred: pd.DataFrame, ref: pd.DataFrame, tasks: Sequence[str]) -> pd.DataFrame:
    """
    One agreement row per task between two label tables.

    Both frames carry ``volume_id`` plus one 0/1 column per task and are
    joined on ``volume_id``.
    """
    merged = pred.merge(ref, on="volume_id", suffixes=("_pred", "_ref"), validate="one_to_one")
    if len(merged) == 0:
        raise MetricError("Label tables share no volume_id")
    rows = []
    for task in tasks:
        try:
            stats_row = agreement_stats(merged[f"{task}_pred"].tolist(), merged[f"{task}_ref"].tolist())
        except KeyError:
            raise MetricError(f"Task '{task}' missing from one of the label tables")
        rows.append({"task": task, "n": len(merged), **stats_row.to_dict()})
    return pd.DataFrame(rows)


def few_shot_interval(values: Sequence[float], level: float = CI_LEVEL) -> Dict[str, float]:
    """Mean and Student-t interval over repeats."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise MetricError("few_shot_interval needs at least one value")
    mean = float(arr.mean())
    sem = float(stats.sem(arr)) if arr.size > 1 else 0.0
    if arr.size == 1 or sem == 0.0:
        low, high = mean, mean
    else:
        low, high = stats.t.interval(level, arr.size - 1, loc=mean, scale=sem)
    return {"mean": mean, "ci_low": float(low), "ci_high": float(high), "n": int(arr.size)}
