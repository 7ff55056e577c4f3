"""
Splits module for SourceCV.
Fold plans for iterative multilabel stratified K-fold, leave-source-out and source-stratified holdout.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import PredefinedSplit

from src.dataset import Dataset, LabelMatrix
from src.errors import DataError
from src.seeding import derive_rng

logger = logging.getLogger(__name__)

KIND_KFOLD = "stratified_kfold"
KIND_LSO = "leave_source_out"
KIND_HOLDOUT = "holdout"
PLAN_KINDS = (KIND_KFOLD, KIND_LSO, KIND_HOLDOUT)


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """
    Partition of record indices into folds.

    The partition property is checked on construction. For holdout plans
    fold 0 is the training part and fold 1 the test part.
    """

    n_folds: int
    assignment: np.ndarray
    kind: str
    fold_source: Optional[Tuple[str, ...]] = None
    seed: Optional[int] = None
    record_ids: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=int)
        object.__setattr__(self, "assignment", assignment)
        if self.kind not in PLAN_KINDS:
            raise ValueError(f"Unknown fold plan kind {self.kind!r}")
        if self.n_folds < 1:
            raise ValueError(f"n_folds must be at least 1, got {self.n_folds}")
        if assignment.ndim != 1:
            raise ValueError("Fold assignment must be one-dimensional")
        if assignment.size and (assignment.min() < 0 or assignment.max() >= self.n_folds):
            raise ValueError(f"Fold ids must lie in 0..{self.n_folds - 1}")
        if self.fold_source is not None and len(self.fold_source) != self.n_folds:
            raise ValueError("fold_source must name one source per fold")
        if self.record_ids is not None and len(self.record_ids) != assignment.size:
            raise ValueError("record_ids must align with the assignment")

    @property
    def n_records(self) -> int:
        return self.assignment.size

    def fold_indices(self, fold: int) -> np.ndarray:
        """Indices of the records in `fold` (the validation part of that round)."""
        return np.flatnonzero(self.assignment == fold)

    validation_indices = fold_indices

    def train_indices(self, fold: int) -> np.ndarray:
        """Indices of the records outside `fold`."""
        return np.flatnonzero(self.assignment != fold)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_folds)

    def splits(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """(train, validation) index pairs, one per fold."""
        for fold in range(self.n_folds):
            yield self.train_indices(fold), self.fold_indices(fold)

    def to_frame(self) -> pd.DataFrame:
        ids = list(self.record_ids) if self.record_ids is not None else list(range(self.n_records))
        frame = pd.DataFrame({"record_id": ids, "fold": self.assignment})
        if self.fold_source is not None:
            frame["source_id"] = [self.fold_source[f] for f in self.assignment]
        return frame

    def as_sklearn_cv(self) -> PredefinedSplit:
        """The same folds as a scikit-learn cross-validator."""
        return PredefinedSplit(test_fold=self.assignment)


def save_fold_plan(plan: FoldPlan, path: str) -> str:
    """Write a plan as CSV (record_id, fold[, source_id])."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.to_frame().to_csv(out, index=False)
    logger.debug(f"Fold plan written to {out}")
    return str(out)


def _pick(candidates: np.ndarray, rng: np.random.Generator) -> int:
    if candidates.size == 1:
        return int(candidates[0])
    return int(rng.choice(candidates))


def stratified_kfold(
    lm: LabelMatrix, K: int, seed: int, record_ids: Optional[Sequence[str]] = None
) -> FoldPlan:
    """
    Iterative multilabel stratification into K folds.

    The label with the fewest unassigned positives is handled first. Each of
    its records goes to the fold with the largest remaining quota for that
    label, then the largest remaining capacity, then a seeded random choice.
    Folds with no capacity left are passed over while another still has
    room. Records without labels are placed last by capacity.

    Args:
        lm: Label matrix of the records to split
        K: Number of folds
        seed: Seed of the shuffle and tie-breaks
        record_ids: Optional ids kept on the plan for audit output

    Raises:
        ValueError: K < 2 or K > number of records
    """
    n = lm.shape[0]
    if K < 2:
        raise ValueError(f"K must be at least 2, got {K}")
    if K > n:
        logger.error(f"Cannot split {n} records into {K} folds")
        raise ValueError(f"K ({K}) exceeds the number of records ({n})")

    rng = derive_rng(seed, KIND_KFOLD)
    Y = lm.values.astype(bool)
    order = rng.permutation(n)
    assignment = np.full(n, -1, dtype=int)

    capacity = np.full(K, n / K)
    quota = np.tile(Y.sum(axis=0) / K, (K, 1))

    def place(i: int, candidates: np.ndarray) -> None:
        f = _pick(candidates, rng)
        assignment[i] = f
        capacity[f] -= 1
        quota[f, Y[i]] -= 1

    while True:
        unassigned = assignment < 0
        remaining = Y[unassigned].sum(axis=0)
        if not remaining.any():
            break
        label = int(np.argmin(np.where(remaining > 0, remaining, np.inf)))
        rows = order[(unassigned & Y[:, label])[order]]
        for i in rows:
            open_folds = np.flatnonzero(capacity > 0)
            folds = open_folds if open_folds.size else np.arange(K)
            label_quota = quota[folds, label]
            folds = folds[label_quota == label_quota.max()]
            fold_capacity = capacity[folds]
            place(i, folds[fold_capacity == fold_capacity.max()])

    for i in order[(assignment < 0)[order]]:
        place(i, np.flatnonzero(capacity == capacity.max()))

    plan = FoldPlan(
        n_folds=K,
        assignment=assignment,
        kind=KIND_KFOLD,
        seed=seed,
        record_ids=tuple(record_ids) if record_ids is not None else None,
    )
    logger.debug(f"Stratified {n} records into {K} folds of sizes {plan.fold_sizes().tolist()}")
    return plan


def leave_source_out(ds: Dataset) -> FoldPlan:
    """
    One fold per source, folds numbered by sorted source id.

    Raises:
        DataError: Fewer than two sources
    """
    sources = ds.source_names
    if len(sources) < 2:
        logger.error("Leave-source-out needs at least two sources")
        raise DataError(f"Leave-source-out needs at least two sources, got {sources}")

    position = {source: f for f, source in enumerate(sources)}
    assignment = np.array([position[record.source_id] for record in ds.records], dtype=int)
    return FoldPlan(
        n_folds=len(sources),
        assignment=assignment,
        kind=KIND_LSO,
        fold_source=tuple(sources),
        record_ids=tuple(ds.record_ids),
    )


def stratified_holdout(
    ds: Dataset, train_frac: float, stratify_by: str = "source", seed: int = 0
) -> FoldPlan:
    """
    Two-fold plan with train_frac of every source in fold 0.

    Within a source of n records, round(train_frac * n) records (clamped to
    [1, n - 1]) are drawn for training. Sources with fewer than two records
    go to training entirely.

    Raises:
        ValueError: train_frac outside (0, 1) or unknown stratify_by
    """
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    if stratify_by != "source":
        raise ValueError(f"Only stratification by source is supported, got {stratify_by!r}")

    sources = ds.source_array()
    assignment = np.zeros(len(ds), dtype=int)
    for source in ds.source_names:
        members = np.flatnonzero(sources == source)
        if members.size < 2:
            logger.warning(f"Source {source} has {members.size} record(s), all assigned to training")
            continue
        n_train = int(np.floor(train_frac * members.size + 0.5))
        n_train = min(max(n_train, 1), members.size - 1)
        shuffled = derive_rng(seed, KIND_HOLDOUT, source).permutation(members)
        assignment[shuffled[n_train:]] = 1

    plan = FoldPlan(
        n_folds=2, assignment=assignment, kind=KIND_HOLDOUT, seed=seed, record_ids=tuple(ds.record_ids)
    )
    sizes = plan.fold_sizes()
    logger.info(f"Holdout split: {sizes[0]} train, {sizes[1]} test")
    return plan
