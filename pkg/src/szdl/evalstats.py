"""Classification evaluation: ROC curves, AUC, operating points, DeLong's test.

AUC is computed as the Mann-Whitney statistic (ties count half) and always
equals the trapezoidal area under the tie-grouped ROC curve.  DeLong's
test compares two correlated AUCs measured on the same cases through
their per-case structural components: for each positive case the mean
heaviside score against all negatives (V10), and symmetrically V01 for
negatives; the variance of the AUC difference follows from the empirical
covariance of those components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .errors import MisalignedInputs, SingleClass, TooFewCases


@dataclass(frozen=True)
class ScoredSet:
    """Aligned likelihood scores and binary ground-truth labels."""

    scores: np.ndarray
    labels: np.ndarray
    subject_ids: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.scores.ndim != 1 or self.scores.shape != self.labels.shape:
            raise MisalignedInputs(
                f"scores {self.scores.shape} and labels {self.labels.shape} must be "
                "equal-length vectors")
        if self.subject_ids is not None and len(self.subject_ids) != len(self.scores):
            raise MisalignedInputs("subject_ids length differs from scores")
        if not np.isin(self.labels, (0, 1)).all():
            raise MisalignedInputs("labels must be 0 or 1")

    def require_both_classes(self) -> None:
        if not (self.labels == 1).any() or not (self.labels == 0).any():
            raise SingleClass("operation needs at least one positive and one negative")


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass(frozen=True)
class RocSummary:
    points: tuple[RocPoint, ...]
    auc: float
    operating_threshold: float
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]


@dataclass(frozen=True)
class ThresholdMetrics:
    """Metrics at one threshold; a metric is None when its class is empty."""

    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    variance: float
    z: Optional[float]
    p_value: Optional[float]
    p_one_sided: Optional[float]
    degenerate: bool = False


def roc_curve(scored: ScoredSet) -> tuple[RocPoint, ...]:
    """Tie-grouped ROC points swept over unique scores, descending.

    Predictions are positive when score >= threshold.  The curve starts at
    (0, 0) (threshold +inf) and ends at (1, 1) (threshold = min score).
    """
    scored.require_both_classes()
    pos = scored.labels == 1
    n_pos = int(pos.sum())
    n_neg = len(scored.labels) - n_pos

    order = np.argsort(-scored.scores, kind="stable")
    sorted_scores = scored.scores[order]
    sorted_pos = pos[order].astype(np.int64)

    points = [RocPoint(math.inf, 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(sorted_scores):
        j = i
        while j < len(sorted_scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_pos[i:j].sum())
        fp += (j - i) - int(sorted_pos[i:j].sum())
        points.append(RocPoint(float(sorted_scores[i]), fp / n_neg, tp / n_pos))
        i = j
    return tuple(points)


def auc(scored: ScoredSet) -> float:
    """Mann-Whitney AUC: P(positive score > negative score) + half ties."""
    scored.require_both_classes()
    pos = scored.scores[scored.labels == 1]
    neg = scored.scores[scored.labels == 0]
    greater = (pos[:, None] > neg[None, :]).sum(dtype=np.float64)
    ties = (pos[:, None] == neg[None, :]).sum(dtype=np.float64)
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


def trapezoid_area(points) -> float:
    total = 0.0
    for a, b in zip(points, points[1:]):
        total += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2
    return total


def metrics_at(scored: ScoredSet, threshold: float) -> ThresholdMetrics:
    """Accuracy / sensitivity / specificity with predictions score >= threshold."""
    predicted = scored.scores >= threshold
    actual = scored.labels == 1
    tp = int((predicted & actual).sum())
    tn = int((~predicted & ~actual).sum())
    n_pos = int(actual.sum())
    n_neg = len(scored.labels) - n_pos
    return ThresholdMetrics(
        accuracy=(tp + tn) / len(scored.labels) if len(scored.labels) else None,
        sensitivity=tp / n_pos if n_pos else None,
        specificity=tn / n_neg if n_neg else None,
    )


def operating_point(points) -> float:
    """Threshold maximizing sensitivity + specificity; ties take the lower one."""
    if not points:
        raise ValueError("empty ROC curve")
    best_threshold = points[0].threshold
    best_j = -math.inf
    for point in points:
        j = point.tpr + (1.0 - point.fpr)
        if j > best_j or (j == best_j and point.threshold < best_threshold):
            best_j = j
            best_threshold = point.threshold
    return float(best_threshold)


def summarize(scored: ScoredSet, report_threshold: float = 0.5) -> RocSummary:
    """Full ROC summary with metrics at the default reporting threshold."""
    points = roc_curve(scored)
    metrics = metrics_at(scored, report_threshold)
    return RocSummary(points=points, auc=auc(scored),
                      operating_threshold=operating_point(points),
                      accuracy=metrics.accuracy, sensitivity=metrics.sensitivity,
                      specificity=metrics.specificity)


def report_dict(scored: ScoredSet, report_threshold: float = 0.5) -> dict:
    """JSON-ready evaluation report: AUC, threshold metrics, operating point, curve."""
    points = roc_curve(scored)
    at_default = metrics_at(scored, report_threshold)
    op = operating_point(points)
    at_op = metrics_at(scored, op)
    return {
        "n": int(len(scored.labels)),
        "n_positive": int(scored.labels.sum()),
        "auc": auc(scored),
        "threshold": report_threshold,
        "accuracy": at_default.accuracy,
        "sensitivity": at_default.sensitivity,
        "specificity": at_default.specificity,
        "operating_point": {
            "threshold": op,
            "accuracy": at_op.accuracy,
            "sensitivity": at_op.sensitivity,
            "specificity": at_op.specificity,
        },
        "curve": [{"threshold": p.threshold if math.isfinite(p.threshold) else None,
                   "fpr": p.fpr, "tpr": p.tpr} for p in points],
    }


def _structural_components(scores: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """V10 (per positive) and V01 (per negative) heaviside means."""
    p = scores[pos][:, None]
    n = scores[~pos][None, :]
    psi = np.where(p > n, 1.0, np.where(p == n, 0.5, 0.0))
    return psi.mean(axis=1), psi.mean(axis=0)


def delong_test(scores_a, scores_b, labels) -> DeLongResult:
    """Two-sided z-test for the difference of two correlated AUCs.

    Zero variance with equal AUCs yields p = 1 by convention; zero
    variance with unequal AUCs is reported as a degenerate outcome with no
    z or p rather than an infinite statistic.
    """
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores_a.shape != scores_b.shape or scores_a.shape != labels.shape:
        raise MisalignedInputs("both score vectors and labels must share one case set")
    pos = labels == 1
    m = int(pos.sum())
    n = len(labels) - m
    if m == 0 or n == 0:
        raise SingleClass("DeLong needs both classes")
    if m < 2 or n < 2:
        raise TooFewCases("DeLong needs at least 2 cases per class")

    v10_a, v01_a = _structural_components(scores_a, pos)
    v10_b, v01_b = _structural_components(scores_b, pos)
    auc_a = float(v10_a.mean())
    auc_b = float(v10_b.mean())

    s10 = np.cov(np.stack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.stack([v01_a, v01_b]), ddof=1)
    s = s10 / m + s01 / n
    variance = float(s[0, 0] + s[1, 1] - 2 * s[0, 1])
    variance = max(variance, 0.0)

    diff = auc_a - auc_b
    if variance == 0.0:
        if abs(diff) < 1e-12:
            return DeLongResult(auc_a, auc_b, 0.0, z=0.0, p_value=1.0, p_one_sided=0.5)
        return DeLongResult(auc_a, auc_b, 0.0, z=None, p_value=None, p_one_sided=None,
                            degenerate=True)
    z = diff / math.sqrt(variance)
    p_two = float(2 * stats.norm.sf(abs(z)))
    p_one = float(stats.norm.sf(z))
    return DeLongResult(auc_a, auc_b, variance, z=float(z), p_value=p_two,
                        p_one_sided=p_one)
