"""
Harmonize module for SourceCV.
Maps AHA statements to SNOMED CT, selects study labels, imputes sinus rhythm and removes duplicates.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from src.dataset import (
    Dataset,
    FeatureVector,
    LabelMatrix,
    LabelSpace,
    Record,
    build_label_matrix,
)
from src.errors import DataError
from src.models import fit_logistic

logger = logging.getLogger(__name__)

DEFAULT_MAPPING_TABLE = Path(__file__).parent / "data" / "v1" / "mapping_table.csv"
MERGE_PREFIX = "snomed:"
SINUS_RHYTHM = "426783006"
DEFAULT_SR_LAMBDA = 0.01
DEFAULT_SR_THRESHOLD = 0.5


@dataclass(frozen=True)
class MappingTable:
    """
    AHA -> SNOMED entries plus SNOMED -> SNOMED merge rules.

    Merge chains are resolved to their terminal code on construction.
    """

    entries: Tuple[Tuple[str, str], ...]
    merge_rules: Tuple[Tuple[str, str], ...] = ()
    aha_to_snomed: Dict[str, str] = field(init=False, repr=False, compare=False)
    merges: Dict[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple((str(a), str(s)) for a, s in self.entries)
        rules = tuple((str(a), str(b)) for a, b in self.merge_rules)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "merge_rules", rules)

        mapping: Dict[str, str] = {}
        for aha, snomed in entries:
            if aha in mapping and mapping[aha] != snomed:
                raise DataError(f"AHA code {aha} maps to both {mapping[aha]} and {snomed}")
            mapping[aha] = snomed

        direct: Dict[str, str] = {}
        for source, target in rules:
            if source in direct and direct[source] != target:
                raise DataError(f"Merge rule for {source} has two targets: {direct[source]} and {target}")
            if source == target:
                raise DataError(f"Merge rule maps {source} onto itself")
            direct[source] = target

        resolved = {}
        for source in direct:
            seen = [source]
            current = direct[source]
            while current in direct:
                if current in seen:
                    raise DataError(f"Merge rules form a cycle: {' -> '.join(seen + [current])}")
                seen.append(current)
                current = direct[current]
            resolved[source] = current

        object.__setattr__(self, "aha_to_snomed", mapping)
        object.__setattr__(self, "merges", resolved)

    @classmethod
    def identity(cls, codes: Iterable[str], merge_rules: Sequence[Tuple[str, str]] = ()) -> "MappingTable":
        """Table mapping every code to itself."""
        return cls(entries=tuple((c, c) for c in codes), merge_rules=tuple(merge_rules))

    @property
    def snomed_codes(self) -> List[str]:
        """Target codes in table order, merge targets included."""
        ordered: List[str] = []
        for _, snomed in self.entries:
            target = self.merges.get(snomed, snomed)
            if target not in ordered:
                ordered.append(target)
        return ordered


@dataclass(frozen=True)
class SelectionCriteria:
    """Thresholds deciding which labels enter the study."""

    min_sources: int = 4
    min_count_per_source: int = 50
    allowed_pool: Optional[FrozenSet[str]] = None

    def __post_init__(self):
        if self.min_sources < 1:
            raise ValueError(f"min_sources must be at least 1, got {self.min_sources}")
        if self.min_count_per_source < 0:
            raise ValueError(f"min_count_per_source must be non-negative, got {self.min_count_per_source}")
        if self.allowed_pool is not None:
            object.__setattr__(self, "allowed_pool", frozenset(str(c) for c in self.allowed_pool))


@dataclass(frozen=True, eq=False)
class ImputationModel:
    """Logistic model predicting sinus rhythm from the other labels."""

    feature_labels: Tuple[str, ...]
    weights: np.ndarray
    intercept: float
    l2: float
    threshold: float = DEFAULT_SR_THRESHOLD
    target_label: str = SINUS_RHYTHM

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (len(self.feature_labels),):
            raise ValueError(
                f"Imputation weights have shape {weights.shape}, expected ({len(self.feature_labels)},)"
            )
        object.__setattr__(self, "weights", weights)

    def score(self, features: np.ndarray) -> np.ndarray:
        z = np.asarray(features, dtype=float) @ self.weights + self.intercept
        return expit(z)


@dataclass
class MappingReport:
    unmapped: Dict[str, int] = field(default_factory=dict)
    records_mapped: int = 0
    records_merged: int = 0
    records_emptied: int = 0

    def to_dict(self) -> Dict:
        return {
            "unmapped": dict(sorted(self.unmapped.items())),
            "records_mapped": self.records_mapped,
            "records_merged": self.records_merged,
            "records_emptied": self.records_emptied,
        }


@dataclass(frozen=True)
class DuplicateReport:
    """
    Outcome of deduplicate.

    exact_duplicates holds (removed_id, kept_id) pairs; metadata_only holds
    groups of retained records sharing metadata but not payloads.
    """

    exact_duplicates: Tuple[Tuple[str, str], ...] = ()
    metadata_only: Tuple[Tuple[str, ...], ...] = ()

    @property
    def n_removed(self) -> int:
        return len(self.exact_duplicates)

    @property
    def n_metadata_only(self) -> int:
        return sum(len(group) for group in self.metadata_only)

    def to_dict(self) -> Dict:
        return {
            "exact_duplicates": [list(pair) for pair in self.exact_duplicates],
            "metadata_only": [list(group) for group in self.metadata_only],
        }


def load_mapping_table(path: Optional[str] = None) -> MappingTable:
    """
    Load a mapping table CSV (aha_code, snomed_code, note).

    Rows whose aha_code starts with "snomed:" are merge rules from that
    SNOMED code to snomed_code.

    Args:
        path: CSV path, defaults to the shipped table

    Raises:
        DataError: Missing file, missing columns or invalid table
    """
    path = Path(path) if path is not None else DEFAULT_MAPPING_TABLE
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        logger.error(f"Mapping table not found: {path}")
        raise DataError(f"Mapping table not found: {path}")

    for column in ("aha_code", "snomed_code"):
        if column not in frame.columns:
            raise DataError(f"Mapping table {path} lacks column {column}")

    entries, rules = [], []
    for row in frame.itertuples(index=False):
        aha, snomed = row.aha_code.strip(), row.snomed_code.strip()
        if aha.startswith(MERGE_PREFIX):
            rules.append((aha[len(MERGE_PREFIX):], snomed))
        else:
            entries.append((aha, snomed))

    table = MappingTable(entries=tuple(entries), merge_rules=tuple(rules))
    logger.info(f"Loaded mapping table with {len(entries)} entries and {len(rules)} merge rules")
    return table


def apply_merge_rules(codes: Iterable[str], table: MappingTable) -> FrozenSet[str]:
    """Replace merged SNOMED codes by their targets."""
    return frozenset(table.merges.get(code, code) for code in codes)


def _map_codes(codes: Iterable[str], table: MappingTable) -> Tuple[FrozenSet[str], List[str]]:
    mapped, unmapped = set(), []
    for code in codes:
        if code in table.aha_to_snomed:
            mapped.add(table.aha_to_snomed[code])
        else:
            unmapped.append(code)
    return apply_merge_rules(mapped, table), unmapped


def map_labels(rec_labels: Iterable[str], table: MappingTable) -> FrozenSet[str]:
    """
    Map AHA codes to SNOMED codes, then apply merge rules.

    Codes absent from the table are dropped.
    """
    mapped, _ = _map_codes(rec_labels, table)
    return mapped


def _with_labels(record: Record, labels: FrozenSet[str]) -> Record:
    return Record(
        record_id=record.record_id,
        source_id=record.source_id,
        age=record.age,
        sex=record.sex,
        labels=labels,
        payload=record.payload,
        normal=record.normal,
        patient_id=record.patient_id,
        date=record.date,
        n_samples=record.n_samples,
    )


def harmonize_dataset(
    ds: Dataset, table: MappingTable, aha_sources: Iterable[str]
) -> Tuple[Dataset, MappingReport]:
    """
    Bring every source into the SNOMED label space.

    Records of `aha_sources` go through map_labels, all others through the
    merge rules only. The new label space lists codes in order of first
    appearance.

    Args:
        ds: Dataset with mixed labelling standards
        table: Mapping table
        aha_sources: Sources labelled with AHA statements

    Returns:
        Tuple of (harmonized Dataset, MappingReport)
    """
    aha_sources = set(aha_sources)
    unknown = aha_sources - set(ds.sources)
    if unknown:
        logger.warning(f"AHA sources not present in dataset: {sorted(unknown)}")

    report = MappingReport()
    records = []
    order: List[str] = []
    for record in ds.records:
        if record.source_id in aha_sources:
            labels, unmapped = _map_codes(record.labels, table)
            for code in unmapped:
                report.unmapped[code] = report.unmapped.get(code, 0) + 1
            report.records_mapped += 1
        else:
            labels = apply_merge_rules(record.labels, table)
            if labels != record.labels:
                report.records_merged += 1
        if record.labels and not labels:
            report.records_emptied += 1
        for code in sorted(labels):
            if code not in order:
                order.append(code)
        records.append(_with_labels(record, labels))

    if report.unmapped:
        logger.warning(
            f"Dropped {sum(report.unmapped.values())} occurrences of "
            f"{len(report.unmapped)} unmapped codes"
        )
    logger.info(
        f"Harmonization complete: {report.records_mapped} mapped, "
        f"{report.records_merged} merged, {report.records_emptied} emptied"
    )
    return ds.with_records(records, LabelSpace(tuple(order))), report


def drop_unlabeled(ds: Dataset) -> Tuple[Dataset, int]:
    """Remove records with no labels unless flagged normal."""
    kept = [record for record in ds.records if record.labels or record.normal]
    removed = len(ds.records) - len(kept)
    logger.info(f"Removed {removed} unlabeled records, {len(kept)} remain")
    return ds.with_records(kept), removed


def count_labels_per_source(ds: Dataset) -> pd.DataFrame:
    """
    Positive counts per label and source.

    Returns:
        DataFrame indexed by label code (label-space order) with one column per source (sorted)
    """
    lm = build_label_matrix(ds)
    frame = pd.DataFrame(lm.values.astype(int), columns=list(lm.labels))
    counts = frame.groupby(ds.source_array()).sum().T if len(ds) else pd.DataFrame(index=list(lm.labels))
    counts = counts.reindex(index=list(lm.labels), columns=ds.source_names, fill_value=0)
    return counts.astype(int)


def select_labels(counts: pd.DataFrame, crit: SelectionCriteria) -> List[str]:
    """
    Labels reaching min_count_per_source in at least min_sources sources.

    Args:
        counts: Labels x sources count table (see count_labels_per_source)
        crit: Selection thresholds

    Returns:
        Selected label codes in the order of counts.index
    """
    # a label must be present to count for a source, even with a zero threshold
    qualifying = counts >= max(crit.min_count_per_source, 1)
    n_sources = qualifying.sum(axis=1)
    selected = [
        str(code) for code in counts.index
        if n_sources[code] >= crit.min_sources
        and (crit.allowed_pool is None or str(code) in crit.allowed_pool)
    ]
    logger.info(f"Selected {len(selected)} of {len(counts.index)} labels")
    return selected


def fit_sr_imputer(
    train_matrix: LabelMatrix,
    sr_targets,
    lam: float = DEFAULT_SR_LAMBDA,
    threshold: float = DEFAULT_SR_THRESHOLD,
    max_iter: int = 2000,
    tol: float = 1e-6,
) -> ImputationModel:
    """
    Fit the sinus-rhythm imputer on records whose standard includes the SR label.

    The loss is the mean cross-entropy plus (lam / 2) * ||w||^2 on raw 0/1
    label inputs; the intercept is not penalised.

    Args:
        train_matrix: Label matrix without the SR column
        sr_targets: Binary SR truth per row
        lam: L2 coefficient
        threshold: Score at or above which SR is called positive

    Raises:
        ValueError: Row count mismatch
        DataError: Targets of a single class
    """
    y = np.asarray(sr_targets, dtype=float).ravel()
    if y.size != train_matrix.shape[0]:
        raise ValueError(f"SR targets ({y.size}) do not match matrix rows ({train_matrix.shape[0]})")
    if SINUS_RHYTHM in train_matrix.label_space:
        raise ValueError("Imputer features must not include the SR label")
    if np.unique(y).size < 2:
        logger.error("SR targets contain a single class")
        raise DataError("SR imputer needs both SR-positive and SR-negative records")

    weights, intercept = fit_logistic(train_matrix.values.astype(float), y, lam, max_iter, tol)
    logger.info(f"Fitted SR imputer on {y.size} records with lambda={lam}")
    return ImputationModel(
        feature_labels=tuple(train_matrix.labels),
        weights=weights,
        intercept=intercept,
        l2=lam,
        threshold=threshold,
    )


def impute_sr(model: ImputationModel, ds: Dataset, sources: Optional[Iterable[str]] = None) -> Dataset:
    """
    Assign the SR label to records of `sources` (default: all).

    Normal-flagged records always get SR. Other records get SR when the
    imputer score reaches the threshold. The SR code is appended to the
    label space if absent.

    Raises:
        DataError: Dataset labels (other than SR) differ from the model's feature labels
    """
    target = model.target_label
    other_labels = set(ds.label_space.labels) - {target}
    if other_labels != set(model.feature_labels):
        missing = sorted(set(model.feature_labels) - other_labels)
        extra = sorted(other_labels - set(model.feature_labels))
        logger.error(f"Label space mismatch: missing {missing}, extra {extra}")
        raise DataError(f"Label space mismatch with imputer: missing {missing}, extra {extra}")

    space = ds.label_space
    if target not in space:
        space = LabelSpace(space.labels + (target,))

    lm = build_label_matrix(ds).select(model.feature_labels)
    calls = model.score(lm.values) >= model.threshold
    selected = set(ds.sources) if sources is None else set(sources)

    records = []
    positives = 0
    for i, record in enumerate(ds.records):
        if record.source_id not in selected:
            records.append(record)
            continue
        sr = record.normal or bool(calls[i])
        labels = record.labels | {target} if sr else record.labels - {target}
        positives += int(sr)
        records.append(_with_labels(record, labels))

    logger.info(f"Imputed SR: {positives} positive records in sources {sorted(selected)}")
    return ds.with_records(records, space)


def _payload_digest(record: Record, base_dir: Optional[str]) -> str:
    if isinstance(record.payload, FeatureVector):
        return hashlib.sha256(record.payload.as_array().tobytes()).hexdigest()
    path = Path(base_dir or ".") / record.payload.path
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as e:
        logger.warning(f"Cannot read {path} for duplicate check, treating as unique: {e}")
        return f"unreadable:{record.record_id}"


def _metadata_key(record: Record) -> Tuple:
    return (
        tuple(sorted(record.labels)),
        record.normal,
        record.source_id,
        record.patient_id,
        record.age,
        record.sex,
        record.n_samples,
        record.date,
    )


def deduplicate(ds: Dataset) -> Tuple[Dataset, DuplicateReport]:
    """
    Remove records duplicating both metadata and payload of an earlier record.

    Records are grouped by (labels, normal flag, source, patient id, age,
    sex, sample count, date). Inside a group, bit-identical payloads
    collapse onto the first record in dataset order.

    Returns:
        Tuple of (deduplicated Dataset, DuplicateReport)
    """
    groups: Dict[Tuple, List[int]] = {}
    for i, record in enumerate(ds.records):
        groups.setdefault(_metadata_key(record), []).append(i)

    removed = set()
    exact: List[Tuple[str, str]] = []
    metadata_only: List[Tuple[str, ...]] = []
    for members in groups.values():
        if len(members) < 2:
            continue
        kept_by_digest: Dict[str, int] = {}
        for i in members:
            digest = _payload_digest(ds.records[i], ds.base_dir)
            if digest in kept_by_digest:
                removed.add(i)
                exact.append((ds.records[i].record_id, ds.records[kept_by_digest[digest]].record_id))
            else:
                kept_by_digest[digest] = i
        if len(kept_by_digest) > 1:
            metadata_only.append(tuple(ds.records[i].record_id for i in sorted(kept_by_digest.values())))

    kept = [record for i, record in enumerate(ds.records) if i not in removed]
    logger.info(
        f"Deduplication complete: {len(exact)} exact duplicates removed, "
        f"{len(metadata_only)} metadata-only groups"
    )
    return ds.with_records(kept), DuplicateReport(tuple(exact), tuple(metadata_only))
