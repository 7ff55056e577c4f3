"""
Reference data module for SourceCV.
Ships the study label set and the per-source expected label counts.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd

from src.dataset import Dataset
from src.errors import DataError
from src.harmonize import count_labels_per_source

logger = logging.getLogger(__name__)

DATA_VERSION = "v1"
DATA_DIR = Path(__file__).parent / "data" / DATA_VERSION

REFERENCE_COUNTS_FILE = "reference_counts.csv"
SOURCE_TOTALS_FILE = "source_totals.csv"

# The 30 diagnoses scored in the 2021 PhysioNet/CinC challenge
CINC_SCORED_CODES: Tuple[str, ...] = (
    "164889003", "164890007", "6374002", "426627000", "733534002",
    "164909002", "713427006", "59118001", "270492004", "713426002",
    "39732003", "445118002", "164947007", "251146004", "111975006",
    "698252002", "426783006", "284470004", "63593006", "10370003",
    "365413008", "427172004", "17338001", "164917005", "47665007",
    "427393009", "426177001", "427084000", "164934002", "59931005",
)


@dataclass(frozen=True, eq=False)
class ReferenceCounts:
    """
    Expected per-source label counts.

    Attributes:
        counts: DataFrame indexed by SNOMED code, one integer column per source
        names: SNOMED code -> human-readable diagnosis
        source_totals: source id -> expected number of ECGs
        tolerance: allowed |observed - expected| as a fraction of expected
    """

    counts: pd.DataFrame
    names: Dict[str, str]
    source_totals: Dict[str, int]
    tolerance: float = 0.0

    def __post_init__(self):
        if self.tolerance < 0:
            raise ValueError(f"Tolerance must be non-negative, got {self.tolerance}")
        if (self.counts.to_numpy() < 0).any():
            raise DataError("Reference counts must be non-negative")

    @property
    def sources(self) -> List[str]:
        return list(self.counts.columns)

    @property
    def labels(self) -> List[str]:
        return list(self.counts.index)

    def total(self, code: str) -> int:
        return int(self.counts.loc[code].sum())


def _resolve(data_dir: Optional[str]) -> Path:
    return Path(data_dir) if data_dir is not None else DATA_DIR


def load_reference_counts(data_dir: Optional[str] = None, tolerance: float = 0.0) -> ReferenceCounts:
    """
    Load the shipped reference counts and source totals.

    The `total` column of the counts file is checked against the row sums.

    Raises:
        DataError: Missing files or inconsistent totals
    """
    directory = _resolve(data_dir)
    try:
        frame = pd.read_csv(directory / REFERENCE_COUNTS_FILE, dtype={"snomed_code": str})
        totals = pd.read_csv(directory / SOURCE_TOTALS_FILE, dtype={"source_id": str})
    except FileNotFoundError as e:
        logger.error(f"Reference data missing: {e}")
        raise DataError(f"Reference data missing: {e}")

    source_columns = [c for c in frame.columns if c not in ("label", "snomed_code", "total")]
    counts = frame.set_index("snomed_code")[source_columns].astype(int)

    row_sums = counts.sum(axis=1)
    stated = frame.set_index("snomed_code")["total"].astype(int)
    inconsistent = row_sums[row_sums != stated]
    if not inconsistent.empty:
        raise DataError(f"Reference totals disagree with per-source counts for {list(inconsistent.index)}")

    names = dict(zip(frame["snomed_code"], frame["label"]))
    source_totals = {row.source_id: int(row.n_ecgs) for row in totals.itertuples()}
    logger.debug(f"Loaded reference counts for {len(counts)} labels over {len(source_columns)} sources")
    return ReferenceCounts(counts=counts, names=names, source_totals=source_totals, tolerance=tolerance)


def study_label_set(data_dir: Optional[str] = None) -> Tuple[str, ...]:
    """The 17 SNOMED codes of the study, in reference table order."""
    return tuple(load_reference_counts(data_dir).labels)


def _within(observed: int, expected: int, tolerance: float) -> bool:
    return abs(observed - expected) <= tolerance * expected


def validate_against_reference(ds: Dataset, ref: ReferenceCounts) -> Dict:
    """
    Compare a harmonized dataset with expected counts.

    Advisory only: nothing is raised for mismatches. Sources absent from the
    dataset are listed under `missing_sources` and not diffed.

    Args:
        ds: Harmonized dataset
        ref: Expected counts

    Returns:
        Dictionary with label_diffs (non-zero differences only),
        unexpected_labels, missing_sources, unexpected_sources,
        total_expected, total_observed and ok
    """
    observed = count_labels_per_source(ds)
    present = [source for source in ref.sources if source in ds.sources]
    missing_sources = [source for source in ref.sources if source not in ds.sources]
    unexpected_sources = [source for source in ds.sources if source not in ref.sources]
    unexpected_labels = [code for code in observed.index if code not in ref.labels]

    label_diffs = []
    for code in ref.labels:
        for source in present:
            expected = int(ref.counts.at[code, source])
            seen = int(observed.at[code, source]) if code in observed.index else 0
            if seen != expected:
                label_diffs.append({
                    "label": code,
                    "name": ref.names.get(code, ""),
                    "source": source,
                    "expected": expected,
                    "observed": seen,
                    "diff": seen - expected,
                    "within_tolerance": _within(seen, expected, ref.tolerance),
                })

    total_expected = sum(ref.source_totals.get(source, 0) for source in present)
    total_observed = sum(ds.sources[source] for source in present)

    ok = (
        all(row["within_tolerance"] for row in label_diffs)
        and _within(total_observed, total_expected, ref.tolerance)
        and not missing_sources
        and not unexpected_sources
        and not unexpected_labels
    )

    for row in label_diffs:
        if not row["within_tolerance"]:
            logger.warning(
                f"Label {row['label']} in {row['source']}: expected {row['expected']}, "
                f"observed {row['observed']}"
            )
    logger.info(
        f"Reference check complete: {len(label_diffs)} differing cells, "
        f"{len(missing_sources)} missing sources, ok={ok}"
    )

    return {
        "label_diffs": label_diffs,
        "unexpected_labels": unexpected_labels,
        "missing_sources": missing_sources,
        "unexpected_sources": unexpected_sources,
        "total_expected": total_expected,
        "total_observed": total_observed,
        "ok": ok,
    }
