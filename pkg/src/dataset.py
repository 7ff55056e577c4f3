"""
Dataset module for SourceCV.
Defines the multi-source multilabel data model and manifest ingestion.
"""

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import DataError

logger = logging.getLogger(__name__)

# Manifest schema
REQUIRED_COLUMNS = [
    "record_id",
    "source_id",
    "age",
    "sex",
    "labels",
    "payload_kind",
    "payload_path",
    "fs_hz",
    "n_leads",
]
OPTIONAL_COLUMNS = ["patient_id", "date", "n_samples"]

NORMAL_TOKEN = "NORMAL"
LABEL_SEPARATOR = "|"
SEX_TOKENS = {"M": "male", "F": "female", "U": "unknown"}
SEX_VALUES = ("male", "female", "unknown")
MAX_AGE = 130.0
PAYLOAD_KINDS = ("signal", "features")

# Lead order of 12-lead signal payload files (one column per lead)
LEAD_ORDER = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")

_LABEL_CODE_PATTERN = re.compile(r"^[A-Za-z0-9_.:+\-]+$")


@dataclass(frozen=True)
class LabelSpace:
    """Ordered set of label codes with a code -> column index."""

    labels: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = tuple(str(code) for code in self.labels)
        if len(set(labels)) != len(labels):
            duplicates = sorted({code for code in labels if labels.count(code) > 1})
            raise DataError(f"Label space contains duplicate codes: {duplicates}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "index", {code: i for i, code in enumerate(labels)})

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, code) -> bool:
        return code in self.index

    def position(self, code: str) -> int:
        """Column position of a label code."""
        if code not in self.index:
            raise DataError(f"Unknown label code: {code}")
        return self.index[code]


@dataclass(frozen=True)
class SignalRef:
    """Reference to a signal payload file (one column per lead, one row per sample)."""

    path: str
    fs_hz: float
    n_leads: int

    def __post_init__(self):
        if not self.fs_hz > 0:
            raise DataError(f"Sampling frequency must be positive, got {self.fs_hz}")
        if self.n_leads < 1:
            raise DataError(f"Lead count must be at least 1, got {self.n_leads}")


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-length real-valued payload."""

    values: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


Payload = Union[SignalRef, FeatureVector]


@dataclass(frozen=True)
class Record:
    """
    One ECG instance.

    The NORMAL sentinel of a manifest is carried by the `normal` flag and never
    becomes a label column.
    """

    record_id: str
    source_id: str
    age: Optional[float]
    sex: str
    labels: FrozenSet[str]
    payload: Payload
    normal: bool = False
    patient_id: Optional[str] = None
    date: Optional[str] = None
    n_samples: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(str(code) for code in self.labels))
        if self.sex not in SEX_VALUES:
            raise DataError(f"Record {self.record_id}: unknown sex value {self.sex!r}")
        if self.age is not None:
            if self.age < 0:
                raise DataError(f"Record {self.record_id}: negative age {self.age}")
            if self.age > MAX_AGE:
                raise DataError(f"Record {self.record_id}: age {self.age} exceeds {MAX_AGE:g}")


@dataclass(frozen=True)
class Dataset:
    """
    Ordered collection of records with their label space.

    `sources` maps each source id (sorted) to its record count and is always
    recomputed from the records. `base_dir` resolves relative payload paths.
    """

    records: Tuple[Record, ...]
    label_space: LabelSpace
    base_dir: Optional[str] = None
    sources: Dict[str, int] = field(init=False, compare=False)

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)

        seen = set()
        for record in records:
            if record.record_id in seen:
                raise DataError(f"Duplicate record_id: {record.record_id}")
            seen.add(record.record_id)
            unknown = record.labels - set(self.label_space.labels)
            if unknown:
                raise DataError(
                    f"Record {record.record_id}: labels {sorted(unknown)} not in label space"
                )

        counts: Dict[str, int] = {}
        for record in records:
            counts[record.source_id] = counts.get(record.source_id, 0) + 1
        object.__setattr__(self, "sources", {s: counts[s] for s in sorted(counts)})

    def __len__(self) -> int:
        return len(self.records)

    @property
    def record_ids(self) -> List[str]:
        return [record.record_id for record in self.records]

    @property
    def source_names(self) -> List[str]:
        return list(self.sources)

    def source_array(self) -> np.ndarray:
        """Source id of every record, as an object array aligned to records."""
        return np.array([record.source_id for record in self.records], dtype=object)

    def by_source(self, source_ids: Iterable[str]) -> "Dataset":
        """Sub-dataset with the records of the given sources, order preserved."""
        wanted = set(source_ids)
        unknown = wanted - set(self.sources)
        if unknown:
            raise DataError(f"Unknown source ids: {sorted(unknown)}")
        indices = [i for i, record in enumerate(self.records) if record.source_id in wanted]
        return subset(self, indices)

    def with_records(
        self, records: Sequence[Record], label_space: Optional[LabelSpace] = None
    ) -> "Dataset":
        """New dataset sharing base_dir, optionally with another label space."""
        return Dataset(
            records=tuple(records),
            label_space=label_space if label_space is not None else self.label_space,
            base_dir=self.base_dir,
        )


@dataclass(frozen=True, eq=False)
class LabelMatrix:
    """Binary records x labels matrix aligned to a label space."""

    values: np.ndarray
    label_space: LabelSpace

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.uint8)
        if values.ndim != 2 or values.shape[1] != len(self.label_space):
            raise ValueError(
                f"Label matrix shape {values.shape} does not match {len(self.label_space)} labels"
            )
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def labels(self) -> Tuple[str, ...]:
        return self.label_space.labels

    def column(self, code: str) -> np.ndarray:
        return self.values[:, self.label_space.position(code)]

    def rows(self, indices) -> "LabelMatrix":
        return LabelMatrix(self.values[np.asarray(indices, dtype=int)], self.label_space)

    def select(self, codes: Sequence[str]) -> "LabelMatrix":
        """Columns for the given codes, in the given order."""
        positions = [self.label_space.position(code) for code in codes]
        return LabelMatrix(self.values[:, positions], LabelSpace(tuple(codes)))

    def positives(self) -> Dict[str, int]:
        """Positive count per label."""
        totals = self.values.sum(axis=0)
        return {code: int(totals[i]) for i, code in enumerate(self.label_space.labels)}


def _parse_age(raw: str, line: int) -> Optional[float]:
    raw = raw.strip()
    if not raw:
        return None
    try:
        age = float(raw)
    except ValueError:
        raise DataError(f"Line {line}: age {raw!r} is not a number")
    if not np.isfinite(age):
        raise DataError(f"Line {line}: age {raw!r} is not finite")
    if age < 0:
        raise DataError(f"Line {line}: negative age {raw}")
    if age > MAX_AGE:
        raise DataError(f"Line {line}: age {raw} exceeds {MAX_AGE:g}")
    return age


def _parse_labels(raw: str, line: int) -> Tuple[FrozenSet[str], bool]:
    raw = raw.strip()
    if not raw:
        return frozenset(), False
    codes = set()
    normal = False
    for token in raw.split(LABEL_SEPARATOR):
        token = token.strip()
        if token == NORMAL_TOKEN:
            normal = True
            continue
        if not token or not _LABEL_CODE_PATTERN.match(token):
            raise DataError(f"Line {line}: unparseable label code {token!r} in {raw!r}")
        codes.add(token)
    return frozenset(codes), normal


def _read_feature_payload(path: Path, line: int) -> FeatureVector:
    try:
        frame = pd.read_csv(path, header=None)
    except FileNotFoundError:
        raise DataError(f"Line {line}: feature payload not found: {path}")
    except Exception as e:
        raise DataError(f"Line {line}: could not read feature payload {path}: {e}")
    values = frame.to_numpy(dtype=float)
    if values.shape[0] != 1 or values.shape[1] == 0:
        raise DataError(f"Line {line}: feature payload {path} must be a single non-empty row")
    if not np.all(np.isfinite(values)):
        raise DataError(f"Line {line}: feature payload {path} contains non-finite values")
    return FeatureVector(tuple(values[0]))


def _parse_payload(row: Dict[str, str], base_dir: Path, line: int) -> Payload:
    kind = row["payload_kind"].strip()
    path = row["payload_path"].strip()
    if kind not in PAYLOAD_KINDS:
        raise DataError(f"Line {line}: unknown payload_kind {kind!r}")
    if not path:
        raise DataError(f"Line {line}: payload_path is empty")

    if kind == "features":
        return _read_feature_payload(base_dir / path, line)

    try:
        fs_hz = float(row["fs_hz"])
        n_leads = int(row["n_leads"])
    except ValueError:
        raise DataError(f"Line {line}: signal payload needs numeric fs_hz and n_leads")
    try:
        return SignalRef(path=path, fs_hz=fs_hz, n_leads=n_leads)
    except DataError as e:
        raise DataError(f"Line {line}: {e}")


def _labels_sidecar(manifest_path: Path) -> Path:
    return manifest_path.with_name(f"{manifest_path.stem}_labels.csv")


def load_dataset(manifest_path: str, label_space: Optional[LabelSpace] = None) -> Dataset:
    """
    Load a dataset from a manifest CSV.

    Args:
        manifest_path: Path to the manifest (header required, see REQUIRED_COLUMNS)
        label_space: Explicit label space. If None, the `<stem>_labels.csv`
            sidecar is used when present, otherwise codes in order of first
            appearance.

    Returns:
        Dataset with all invariants checked

    Raises:
        DataError: Missing file, malformed rows, duplicate ids, invalid values
    """
    path = Path(manifest_path)
    if not path.is_file():
        logger.error(f"Manifest not found: {path}")
        raise DataError(f"Manifest not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except Exception as e:
        logger.error(f"Could not read manifest {path}: {e}")
        raise DataError(f"Could not read manifest {path}: {e}")

    missing = [column for column in REQUIRED_COLUMNS if column not in frame.columns]
    if missing:
        raise DataError(f"Manifest {path} lacks required columns: {missing}")

    logger.info(f"Loading manifest {path} with {len(frame)} rows")
    base_dir = path.parent
    records = []
    seen_ids = set()
    first_seen: List[str] = []

    for idx, row in enumerate(frame.to_dict(orient="records")):
        line = idx + 2  # header is line 1
        record_id = row["record_id"].strip()
        if not record_id:
            raise DataError(f"Line {line}: empty record_id")
        if record_id in seen_ids:
            logger.error(f"Duplicate record_id {record_id} at line {line}")
            raise DataError(f"Duplicate record_id: {record_id} (line {line})")
        seen_ids.add(record_id)

        source_id = row["source_id"].strip()
        if not source_id:
            raise DataError(f"Line {line}: empty source_id")

        sex_token = row["sex"].strip().upper()
        if sex_token not in SEX_TOKENS:
            raise DataError(f"Line {line}: unknown sex token {row['sex']!r} (expected M, F or U)")

        age = _parse_age(row["age"], line)
        labels, normal = _parse_labels(row["labels"], line)
        if not labels and not normal:
            raise DataError(f"Line {line}: record {record_id} has no labels and no {NORMAL_TOKEN} marker")

        n_samples = None
        if row.get("n_samples", "").strip():
            try:
                n_samples = int(row["n_samples"])
            except ValueError:
                raise DataError(f"Line {line}: n_samples {row['n_samples']!r} is not an integer")

        for code in sorted(labels):
            if code not in first_seen:
                first_seen.append(code)

        records.append(
            Record(
                record_id=record_id,
                source_id=source_id,
                age=age,
                sex=SEX_TOKENS[sex_token],
                labels=labels,
                payload=_parse_payload(row, base_dir, line),
                normal=normal,
                patient_id=row.get("patient_id", "").strip() or None,
                date=row.get("date", "").strip() or None,
                n_samples=n_samples,
            )
        )

    if label_space is None:
        sidecar = _labels_sidecar(path)
        if sidecar.is_file():
            order = pd.read_csv(sidecar, dtype=str, keep_default_na=False)["label"].tolist()
            label_space = LabelSpace(tuple(order))
            logger.debug(f"Label order read from {sidecar}")
        else:
            label_space = LabelSpace(tuple(first_seen))

    dataset = Dataset(records=tuple(records), label_space=label_space, base_dir=str(base_dir))
    logger.info(
        f"Loaded {len(dataset)} records from {len(dataset.sources)} sources "
        f"with {len(dataset.label_space)} labels"
    )
    return dataset


def _format_number(value: Optional[float]) -> str:
    if value is None:
        return ""
    return f"{value:g}" if float(value).is_integer() else repr(float(value))


def save_dataset(ds: Dataset, manifest_path: str) -> str:
    """
    Write a dataset as a manifest CSV plus its label-order sidecar.

    In-memory feature payloads are written as single-row CSVs under
    `<stem>_payloads/`. Signal payload paths are rewritten relative to the new
    manifest location.

    Returns:
        Path of the written manifest
    """
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload_dir = path.with_name(f"{path.stem}_payloads")
    source_dir = Path(ds.base_dir) if ds.base_dir else Path.cwd()

    rows = []
    for i, record in enumerate(ds.records):
        labels = sorted(record.labels, key=ds.label_space.position)
        if record.normal:
            labels.append(NORMAL_TOKEN)
        row = {
            "record_id": record.record_id,
            "source_id": record.source_id,
            "age": _format_number(record.age),
            "sex": {v: k for k, v in SEX_TOKENS.items()}[record.sex],
            "labels": LABEL_SEPARATOR.join(labels),
            "patient_id": record.patient_id or "",
            "date": record.date or "",
            "n_samples": "" if record.n_samples is None else str(record.n_samples),
        }
        if isinstance(record.payload, FeatureVector):
            payload_dir.mkdir(parents=True, exist_ok=True)
            payload_file = payload_dir / f"{i:06d}.csv"
            pd.DataFrame([record.payload.values]).to_csv(payload_file, header=False, index=False)
            row.update(
                payload_kind="features",
                payload_path=os.path.relpath(payload_file, path.parent),
                fs_hz="",
                n_leads="",
            )
        else:
            resolved = source_dir / record.payload.path
            row.update(
                payload_kind="signal",
                payload_path=os.path.relpath(resolved, path.parent),
                fs_hz=_format_number(record.payload.fs_hz),
                n_leads=str(record.payload.n_leads),
            )
        rows.append(row)

    frame = pd.DataFrame(rows, columns=REQUIRED_COLUMNS + OPTIONAL_COLUMNS)
    frame.to_csv(path, index=False)
    pd.DataFrame({"label": list(ds.label_space.labels)}).to_csv(_labels_sidecar(path), index=False)
    logger.info(f"Saved {len(ds)} records to {path}")
    return str(path)


def build_label_matrix(ds: Dataset) -> LabelMatrix:
    """
    One-hot encode the record label sets.

    Args:
        ds: Dataset

    Returns:
        LabelMatrix of shape (len(ds), len(ds.label_space))
    """
    values = np.zeros((len(ds.records), len(ds.label_space)), dtype=np.uint8)
    for i, record in enumerate(ds.records):
        for code in record.labels:
            values[i, ds.label_space.index[code]] = 1
    return LabelMatrix(values, ds.label_space)


def restrict_labels(ds: Dataset, keep: Iterable[str]) -> Dataset:
    """
    Restrict the label space to `keep`, keeping every record.

    Args:
        ds: Dataset
        keep: Label codes to keep, all of which must be in ds.label_space

    Returns:
        New Dataset whose label space is `keep` in the original order

    Raises:
        DataError: If keep contains a code outside the label space
    """
    keep = set(keep)
    unknown = keep - set(ds.label_space.labels)
    if unknown:
        logger.error(f"Cannot restrict to unknown labels: {sorted(unknown)}")
        raise DataError(f"Cannot restrict to unknown labels: {sorted(unknown)}")

    space = LabelSpace(tuple(code for code in ds.label_space.labels if code in keep))
    records = [
        Record(
            record_id=r.record_id,
            source_id=r.source_id,
            age=r.age,
            sex=r.sex,
            labels=r.labels & keep,
            payload=r.payload,
            normal=r.normal,
            patient_id=r.patient_id,
            date=r.date,
            n_samples=r.n_samples,
        )
        for r in ds.records
    ]
    logger.debug(f"Restricted label space from {len(ds.label_space)} to {len(space)} labels")
    return ds.with_records(records, space)


def subset(ds: Dataset, indices) -> Dataset:
    """Sub-dataset of the records at `indices` (order as given), same label space."""
    return ds.with_records([ds.records[int(i)] for i in indices])


def feature_matrix(ds: Dataset) -> np.ndarray:
    """
    Stack FeatureVector payloads into an n x d array.

    Raises:
        DataError: If a payload is a SignalRef or lengths differ
    """
    if not ds.records:
        return np.zeros((0, 0))
    rows = []
    for record in ds.records:
        if not isinstance(record.payload, FeatureVector):
            raise DataError(f"Record {record.record_id} has a signal payload, not features")
        rows.append(record.payload.values)
    lengths = {len(row) for row in rows}
    if len(lengths) != 1:
        raise DataError(f"Feature payloads have differing lengths: {sorted(lengths)}")
    return np.asarray(rows, dtype=float)


def load_signal(record: Record, base_dir: Optional[str] = None) -> np.ndarray:
    """
    Read a signal payload file.

    Args:
        record: Record with a SignalRef payload
        base_dir: Directory that relative payload paths resolve against

    Returns:
        Array of shape (n_leads, n_samples)

    Raises:
        DataError: Missing or malformed file, lead count mismatch
    """
    if not isinstance(record.payload, SignalRef):
        raise DataError(f"Record {record.record_id} has no signal payload")
    path = Path(base_dir or ".") / record.payload.path
    try:
        frame = pd.read_csv(path, header=None)
    except FileNotFoundError:
        logger.error(f"Signal file not found: {path}")
        raise DataError(f"Signal file not found: {path}")
    except Exception as e:
        raise DataError(f"Could not read signal file {path}: {e}")

    values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    # a header row of lead names coerces to NaN
    if values.shape[0] > 0 and np.all(np.isnan(values[0])):
        values = values[1:]
    if values.shape[1] != record.payload.n_leads:
        raise DataError(
            f"Signal file {path} has {values.shape[1]} leads, manifest says {record.payload.n_leads}"
        )
    return values.T
