"""
Unit tests for the reference module.
"""

import pandas as pd
import pytest

from src.dataset import Dataset, FeatureVector, LabelSpace, Record
from src.errors import DataError
from src.harmonize import SelectionCriteria, select_labels
from src.reference import (
    CINC_SCORED_CODES,
    load_reference_counts,
    study_label_set,
    validate_against_reference,
)


def write_reference(directory, rows, totals):
    directory.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(directory / "reference_counts.csv", index=False)
    pd.DataFrame(totals).to_csv(directory / "source_totals.csv", index=False)
    return str(directory)


def tiny_reference(tmp_path, total_a=2):
    return write_reference(
        tmp_path / "ref",
        {"label": ["alpha", "beta"], "snomed_code": ["111", "222"], "s1": [2, 1], "s2": [0, 1], "total": [total_a, 2]},
        {"source_id": ["s1", "s2"], "name": ["One", "Two"], "n_ecgs": [3, 1]},
    )


def record(record_id, source, labels):
    return Record(
        record_id=record_id, source_id=source, age=None, sex="unknown", labels=frozenset(labels),
        payload=FeatureVector((0.0,)), normal=not labels,
    )


def matching_dataset():
    return Dataset(
        records=(
            record("a", "s1", {"111"}),
            record("b", "s1", {"111", "222"}),
            record("c", "s1", set()),
            record("d", "s2", {"222"}),
        ),
        label_space=LabelSpace(("111", "222")),
    )


class TestShippedReference:
    """Tests for the shipped reference tables."""

    def test_study_label_set(self):
        """Test the 17 study codes."""
        codes = study_label_set()
        assert len(codes) == 17
        assert "426783006" in codes
        assert set(codes) <= set(CINC_SCORED_CODES)

    def test_row_sums_and_sources(self):
        """Test that totals match row sums and the five sources are present."""
        ref = load_reference_counts()
        assert ref.sources == ["chapman_ningbo", "cpsc", "g12ec", "ptb", "sph"]
        assert ref.total("426783006") == 45829
        assert ref.source_totals["cpsc"] == 6110
        assert ref.names["164889003"] == "atrial fibrillation"

    def test_selection_reproduces_study_set(self):
        """Test that the default selection thresholds pick all 17 study labels."""
        ref = load_reference_counts()
        crit = SelectionCriteria(min_sources=4, min_count_per_source=50, allowed_pool=frozenset(CINC_SCORED_CODES))
        assert select_labels(ref.counts, crit) == ref.labels


class TestLoadReferenceCounts:
    """Tests for load_reference_counts function."""

    def test_custom_directory(self, tmp_path):
        """Test loading tables from another directory."""
        ref = load_reference_counts(tiny_reference(tmp_path), tolerance=0.1)
        assert ref.labels == ["111", "222"]
        assert ref.tolerance == 0.1

    def test_inconsistent_total(self, tmp_path):
        """Test that a wrong total column raises DataError."""
        with pytest.raises(DataError):
            load_reference_counts(tiny_reference(tmp_path, total_a=5))

    def test_missing_files(self, tmp_path):
        """Test that a missing directory raises DataError."""
        with pytest.raises(DataError):
            load_reference_counts(str(tmp_path / "nowhere"))

    def test_negative_tolerance(self, tmp_path):
        """Test that a negative tolerance raises ValueError."""
        with pytest.raises(ValueError):
            load_reference_counts(tiny_reference(tmp_path), tolerance=-0.1)


class TestValidateAgainstReference:
    """Tests for validate_against_reference function."""

    def test_exact_match(self, tmp_path):
        """Test that a matching dataset is ok with no differences."""
        result = validate_against_reference(matching_dataset(), load_reference_counts(tiny_reference(tmp_path)))
        assert result["ok"]
        assert result["label_diffs"] == []
        assert (result["total_expected"], result["total_observed"]) == (4, 4)

    def test_count_mismatch(self, tmp_path):
        """Test that a missing label is reported with its signed difference."""
        ds = matching_dataset()
        ds = ds.with_records([record("a", "s1", set())] + list(ds.records[1:]))
        result = validate_against_reference(ds, load_reference_counts(tiny_reference(tmp_path)))
        assert not result["ok"]
        assert result["label_diffs"] == [{
            "label": "111", "name": "alpha", "source": "s1",
            "expected": 2, "observed": 1, "diff": -1, "within_tolerance": False,
        }]

    def test_tolerance(self, tmp_path):
        """Test that a difference inside the tolerance keeps ok true."""
        ds = matching_dataset()
        ds = ds.with_records([record("a", "s1", set())] + list(ds.records[1:]))
        result = validate_against_reference(ds, load_reference_counts(tiny_reference(tmp_path), tolerance=0.5))
        assert result["label_diffs"][0]["within_tolerance"]
        assert result["ok"]

    def test_missing_and_unexpected_sources(self, tmp_path):
        """Test that source mismatches are listed and fail the check."""
        ds = matching_dataset()
        ds = ds.with_records([r for r in ds.records if r.source_id == "s1"] + [record("e", "s9", {"222"})])
        result = validate_against_reference(ds, load_reference_counts(tiny_reference(tmp_path)))
        assert result["missing_sources"] == ["s2"]
        assert result["unexpected_sources"] == ["s9"]
        assert not result["ok"]

    def test_unexpected_label(self, tmp_path):
        """Test that labels outside the reference are listed."""
        ds = matching_dataset()
        space = LabelSpace(("111", "222", "333"))
        ds = ds.with_records([record("z", "s2", {"333"})] + list(ds.records), space)
        result = validate_against_reference(ds, load_reference_counts(tiny_reference(tmp_path)))
        assert result["unexpected_labels"] == ["333"]
        assert not result["ok"]
