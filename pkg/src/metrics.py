"""
Metrics module for SourceCV.
ROC-AUC with label filtering, source-prediction accuracy and CV reliability statistics.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata
from sklearn.metrics import confusion_matrix

from src.dataset import LabelMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Per-record, per-label classifier scores with their column labels."""

    values: np.ndarray
    labels: Tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        labels = tuple(self.labels)
        if values.ndim != 2 or values.shape[1] != len(labels):
            raise ValueError(f"Score matrix shape {values.shape} does not match {len(labels)} labels")
        if not np.all(np.isfinite(values)):
            raise ValueError("Score matrix contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def column(self, code: str) -> np.ndarray:
        try:
            return self.values[:, self.labels.index(code)]
        except ValueError:
            raise ValueError(f"Label {code} has no score column")


@dataclass(frozen=True)
class ReliabilityEntry:
    context_id: str
    cv_estimate: float
    test_value: float
    signed_error: float


@dataclass(frozen=True)
class ReliabilityReport:
    """Signed errors of CV estimates against test values, with ME/SD/RMSE."""

    entries: Tuple[ReliabilityEntry, ...]
    me: float
    sd: float
    rmse: float

    @property
    def n(self) -> int:
        return len(self.entries)

    def to_dict(self) -> Dict:
        return {
            "me": self.me,
            "sd": self.sd,
            "rmse": self.rmse,
            "n": self.n,
            "entries": [
                {
                    "context_id": e.context_id,
                    "cv_estimate": e.cv_estimate,
                    "test_value": e.test_value,
                    "signed_error": e.signed_error,
                }
                for e in self.entries
            ],
        }


def roc_auc(scores, truth) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic.

    Ties count one half (midranks).

    Args:
        scores: Real scores
        truth: Binary truth of the same length

    Returns:
        AUC in [0, 1]

    Raises:
        ValueError: Length mismatch or single-class truth
    """
    scores = np.asarray(scores, dtype=float).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    if scores.shape != truth.shape:
        raise ValueError(f"Scores ({scores.size}) and truth ({truth.size}) differ in length")

    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when truth has a single class")

    ranks = rankdata(scores)
    rank_sum = ranks[truth].sum()
    u_statistic = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def valid_labels(train_lm: LabelMatrix, eval_lm: LabelMatrix) -> List[str]:
    """
    Labels with at least one positive in both the training and the evaluation slice.

    Returned in the evaluation label-space order.
    """
    train_pos = train_lm.positives()
    eval_pos = eval_lm.positives()
    return [
        code for code in eval_lm.labels
        if eval_pos.get(code, 0) > 0 and train_pos.get(code, 0) > 0
    ]


def _evaluable(column: np.ndarray) -> bool:
    positives = int(column.sum())
    return 0 < positives < column.size


def per_label_auc(
    sm: ScoreMatrix, lm: LabelMatrix, valid: Iterable[str], n_jobs: int = 1
) -> Dict[str, float]:
    """
    AUC per valid label having both classes in the evaluation slice.

    Args:
        sm: Scores on the evaluation slice
        lm: Truth on the evaluation slice
        valid: Labels allowed by the filtering rule
        n_jobs: joblib workers

    Returns:
        Dictionary label -> AUC in label-space order
    """
    if sm.shape[0] != lm.shape[0]:
        raise ValueError(f"Score rows ({sm.shape[0]}) and label rows ({lm.shape[0]}) differ")
    valid = set(valid)
    codes = [code for code in lm.labels if code in valid and _evaluable(lm.column(code))]
    aucs = Parallel(n_jobs=n_jobs)(
        delayed(roc_auc)(sm.column(code), lm.column(code)) for code in codes
    )
    return dict(zip(codes, aucs))


def macro_auc(sm: ScoreMatrix, lm: LabelMatrix, valid: Iterable[str], n_jobs: int = 1) -> float:
    """
    Unweighted mean of per-label AUCs over valid labels.

    Raises:
        ValueError: No valid label with both classes in the evaluation slice
    """
    aucs = per_label_auc(sm, lm, valid, n_jobs=n_jobs)
    if not aucs:
        raise ValueError("No valid label left for macro AUC")
    return float(np.mean(list(aucs.values())))


def micro_auc(sm: ScoreMatrix, lm: LabelMatrix, valid: Iterable[str]) -> float:
    """
    AUC of all (score, truth) pairs pooled over the valid labels.

    Raises:
        ValueError: No valid label, or the pooled truth is single-class
    """
    if sm.shape[0] != lm.shape[0]:
        raise ValueError(f"Score rows ({sm.shape[0]}) and label rows ({lm.shape[0]}) differ")
    valid = set(valid)
    codes = [code for code in lm.labels if code in valid]
    if not codes:
        raise ValueError("No valid label left for micro AUC")
    scores = np.concatenate([sm.column(code) for code in codes])
    truth = np.concatenate([lm.column(code) for code in codes])
    return roc_auc(scores, truth)


def reliability(
    pairs: Sequence[Tuple[float, float]], context_ids: Optional[Sequence[str]] = None
) -> ReliabilityReport:
    """
    Mean error, sample standard deviation and RMSE of CV estimates.

    signed_error = cv_estimate - test_value, sd uses n - 1 and
    rmse = sqrt(me^2 + sd^2).

    Args:
        pairs: (cv_estimate, test_value) per experiment
        context_ids: Optional identifiers, defaults to "0", "1", ...

    Raises:
        ValueError: Fewer than two pairs
    """
    if len(pairs) < 2:
        raise ValueError(f"Reliability needs at least 2 pairs, got {len(pairs)}")
    if context_ids is None:
        context_ids = [str(i) for i in range(len(pairs))]
    if len(context_ids) != len(pairs):
        raise ValueError("context_ids and pairs differ in length")

    entries = tuple(
        ReliabilityEntry(str(cid), float(cv), float(test), float(cv) - float(test))
        for cid, (cv, test) in zip(context_ids, pairs)
    )
    errors = np.array([e.signed_error for e in entries])
    me = float(errors.mean())
    sd = float(errors.std(ddof=1))
    rmse = math.sqrt(me * me + sd * sd)
    return ReliabilityReport(entries=entries, me=me, sd=sd, rmse=rmse)


def confusion_and_accuracy(pred, truth, classes: Sequence[str]) -> Tuple[np.ndarray, float]:
    """
    Confusion matrix (rows truth, columns prediction) and accuracy.

    Raises:
        ValueError: Empty input or length mismatch
    """
    pred = np.asarray(pred).astype(str)
    truth = np.asarray(truth).astype(str)
    if pred.size == 0:
        raise ValueError("Cannot compute accuracy of empty predictions")
    if pred.shape != truth.shape:
        raise ValueError(f"Predictions ({pred.size}) and truth ({truth.size}) differ in length")

    matrix = confusion_matrix(truth, pred, labels=[str(c) for c in classes])
    accuracy = float(np.trace(matrix) / pred.size)
    return matrix, accuracy


def majority_baseline(train_truth, test_truth) -> float:
    """Accuracy on test_truth of always predicting the most frequent training class."""
    train_truth = np.asarray(train_truth, dtype=object)
    test_truth = np.asarray(test_truth, dtype=object)
    if train_truth.size == 0 or test_truth.size == 0:
        raise ValueError("Majority baseline needs non-empty train and test truth")
    classes, counts = np.unique(train_truth.astype(str), return_counts=True)
    majority = classes[int(np.argmax(counts))]
    return float(np.mean(test_truth.astype(str) == majority))
