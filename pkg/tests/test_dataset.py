"""
Unit tests for the dataset module.
"""

import numpy as np
import pandas as pd
import pytest

from src.dataset import (
    Dataset,
    FeatureVector,
    LabelSpace,
    Record,
    SignalRef,
    build_label_matrix,
    feature_matrix,
    load_dataset,
    load_signal,
    restrict_labels,
    save_dataset,
    subset,
)
from src.errors import DataError

HEADER = "record_id,source_id,age,sex,labels,payload_kind,payload_path,fs_hz,n_leads\n"


def write_manifest(tmp_path, rows, header=HEADER):
    """Write a manifest whose feature payloads all point at one shared file."""
    (tmp_path / "f.csv").write_text("0.1,0.2,0.3\n")
    path = tmp_path / "manifest.csv"
    path.write_text(header + "".join(row + "\n" for row in rows))
    return path


def make_record(record_id, source, labels, values=(0.0, 1.0), **kwargs):
    return Record(
        record_id=record_id,
        source_id=source,
        age=kwargs.pop("age", 50.0),
        sex=kwargs.pop("sex", "female"),
        labels=frozenset(labels),
        payload=FeatureVector(values),
        **kwargs,
    )


class TestLabelSpace:
    """Tests for LabelSpace."""

    def test_positions_follow_order(self):
        """Test that positions follow the given order."""
        space = LabelSpace(("b", "a", "c"))
        assert space.position("b") == 0
        assert space.position("c") == 2
        assert "a" in space
        assert len(space) == 3

    def test_duplicate_codes_rejected(self):
        """Test that duplicate codes raise DataError."""
        with pytest.raises(DataError):
            LabelSpace(("a", "a"))

    def test_unknown_code_position(self):
        """Test that asking for an unknown code raises DataError."""
        with pytest.raises(DataError):
            LabelSpace(("a",)).position("z")


class TestRecordAndDataset:
    """Tests for Record and Dataset invariants."""

    def test_age_bounds(self):
        """Test that ages outside [0, 130] are rejected."""
        with pytest.raises(DataError):
            make_record("r1", "s", [], age=-1.0)
        with pytest.raises(DataError):
            make_record("r1", "s", [], age=131.0)

    def test_duplicate_record_ids(self):
        """Test that duplicate ids are rejected."""
        records = (make_record("r1", "s", ["a"]), make_record("r1", "t", ["a"]))
        with pytest.raises(DataError):
            Dataset(records=records, label_space=LabelSpace(("a",)))

    def test_labels_outside_space(self):
        """Test that labels outside the label space are rejected."""
        with pytest.raises(DataError):
            Dataset(records=(make_record("r1", "s", ["b"]),), label_space=LabelSpace(("a",)))

    def test_sources_are_sorted_counts(self):
        """Test that sources maps each source to its count, sorted by id."""
        records = (
            make_record("r1", "zeta", ["a"]),
            make_record("r2", "alpha", ["a"]),
            make_record("r3", "zeta", []),
        )
        ds = Dataset(records=records, label_space=LabelSpace(("a",)))
        assert list(ds.sources.items()) == [("alpha", 1), ("zeta", 2)]
        assert sum(ds.sources.values()) == len(ds)

    def test_by_source_keeps_order(self):
        """Test that by_source keeps the record order."""
        records = tuple(make_record(f"r{i}", "s" if i % 2 else "t", []) for i in range(6))
        ds = Dataset(records=records, label_space=LabelSpace(()))
        assert ds.by_source(["s"]).record_ids == ["r1", "r3", "r5"]
        with pytest.raises(DataError):
            ds.by_source(["missing"])


class TestLoadDataset:
    """Tests for load_dataset function."""

    def test_loads_valid_manifest(self, tmp_path):
        """Test loading a small valid manifest."""
        path = write_manifest(tmp_path, [
            "r1,A,63,M,164889003|426783006,features,f.csv,,",
            "r2,A,,F,NORMAL,features,f.csv,,",
            "r3,B,40,U,164889003,features,f.csv,,",
        ])
        ds = load_dataset(str(path))

        assert len(ds) == 3
        assert ds.sources == {"A": 2, "B": 1}
        assert ds.label_space.labels == ("164889003", "426783006")
        assert ds.records[1].age is None
        assert ds.records[1].normal
        assert ds.records[1].labels == frozenset()
        assert ds.records[2].sex == "unknown"

    def test_normal_never_becomes_a_label(self, tmp_path):
        """Test that NORMAL is carried by the flag only."""
        path = write_manifest(tmp_path, ["r1,A,50,M,NORMAL,features,f.csv,,"])
        ds = load_dataset(str(path))
        assert "NORMAL" not in ds.label_space

    def test_duplicate_record_id_names_line(self, tmp_path):
        """Test that a duplicate id is reported with its line."""
        path = write_manifest(tmp_path, [
            "r1,A,50,M,x,features,f.csv,,",
            "r1,A,50,M,x,features,f.csv,,",
        ])
        with pytest.raises(DataError, match="line 3"):
            load_dataset(str(path))

    def test_age_out_of_range(self, tmp_path):
        """Test that an age of 150 is rejected with its line."""
        path = write_manifest(tmp_path, ["r1,A,150,M,x,features,f.csv,,"])
        with pytest.raises(DataError, match="Line 2"):
            load_dataset(str(path))

    def test_bad_sex_token(self, tmp_path):
        """Test that sex tokens other than M, F, U are rejected."""
        path = write_manifest(tmp_path, ["r1,A,50,X,x,features,f.csv,,"])
        with pytest.raises(DataError):
            load_dataset(str(path))

    def test_empty_labels_without_normal(self, tmp_path):
        """Test that a record without labels or NORMAL is rejected."""
        path = write_manifest(tmp_path, ["r1,A,50,M,,features,f.csv,,"])
        with pytest.raises(DataError):
            load_dataset(str(path))

    def test_missing_column(self, tmp_path):
        """Test that a manifest lacking a required column is rejected."""
        path = write_manifest(tmp_path, ["r1,A,50,M,x"], header="record_id,source_id,age,sex,labels\n")
        with pytest.raises(DataError, match="required columns"):
            load_dataset(str(path))

    def test_missing_file(self, tmp_path):
        """Test that a missing manifest raises DataError."""
        with pytest.raises(DataError):
            load_dataset(str(tmp_path / "none.csv"))

    def test_signal_payload_needs_rate(self, tmp_path):
        """Test that signal rows need numeric fs_hz and n_leads."""
        path = write_manifest(tmp_path, ["r1,A,50,M,x,signal,sig.csv,,"])
        with pytest.raises(DataError):
            load_dataset(str(path))

    def test_explicit_label_space(self, tmp_path):
        """Test that an explicit label space fixes the column order."""
        path = write_manifest(tmp_path, ["r1,A,50,M,a|b,features,f.csv,,"])
        ds = load_dataset(str(path), label_space=LabelSpace(("b", "a", "c")))
        assert ds.label_space.labels == ("b", "a", "c")


class TestSaveDataset:
    """Tests for save_dataset function."""

    def test_save_then_load_preserves_dataset(self, tmp_path):
        """Test that saving and loading gives back the same records and label order."""
        records = (
            make_record("r1", "A", ["b"], values=(0.5, -1.25)),
            make_record("r2", "B", [], values=(2.0, 3.0), normal=True, age=None, sex="unknown"),
            make_record("r3", "A", ["a", "b"], values=(1.0, 0.0), patient_id="p7", n_samples=5000),
        )
        ds = Dataset(records=records, label_space=LabelSpace(("b", "a", "unused")))
        path = save_dataset(ds, str(tmp_path / "out" / "manifest.csv"))
        loaded = load_dataset(path)

        assert loaded.label_space.labels == ("b", "a", "unused")
        assert loaded.records == ds.records
        assert loaded.sources == ds.sources


class TestLabelMatrix:
    """Tests for build_label_matrix and restrict_labels."""

    def test_columns_follow_label_space(self):
        """Test that matrix columns follow the label space order."""
        records = (make_record("r1", "s", ["b"]), make_record("r2", "s", ["a", "b"]))
        ds = Dataset(records=records, label_space=LabelSpace(("b", "a")))
        lm = build_label_matrix(ds)
        assert lm.shape == (2, 2)
        assert lm.values.tolist() == [[1, 0], [1, 1]]
        assert lm.positives() == {"b": 2, "a": 1}
        assert lm.select(["a"]).values.tolist() == [[0], [1]]

    def test_restrict_keeps_records(self):
        """Test that restricting labels keeps every record and drops codes."""
        records = (make_record("r1", "s", ["a"]), make_record("r2", "s", ["a", "b"]))
        ds = Dataset(records=records, label_space=LabelSpace(("a", "b")))
        restricted = restrict_labels(ds, ["b"])
        assert len(restricted) == 2
        assert restricted.label_space.labels == ("b",)
        assert restricted.records[0].labels == frozenset()

    def test_restrict_unknown_label(self):
        """Test that restricting to an unknown label raises DataError."""
        ds = Dataset(records=(make_record("r1", "s", ["a"]),), label_space=LabelSpace(("a",)))
        with pytest.raises(DataError):
            restrict_labels(ds, ["zzz"])


class TestFeatureMatrixAndSignals:
    """Tests for feature_matrix, subset and load_signal."""

    def test_feature_matrix_and_subset(self):
        """Test stacking feature payloads and taking a subset."""
        records = tuple(make_record(f"r{i}", "s", [], values=(i, -i)) for i in range(4))
        ds = Dataset(records=records, label_space=LabelSpace(()))
        sub = subset(ds, [3, 1])
        np.testing.assert_array_equal(feature_matrix(sub), [[3, -3], [1, -1]])

    def test_feature_matrix_rejects_mixed_lengths(self):
        """Test that payloads of differing lengths raise DataError."""
        records = (make_record("r1", "s", [], values=(1.0,)), make_record("r2", "s", [], values=(1.0, 2.0)))
        ds = Dataset(records=records, label_space=LabelSpace(()))
        with pytest.raises(DataError):
            feature_matrix(ds)

    def test_load_signal_with_lead_header(self, tmp_path):
        """Test that a lead-name header row is skipped and leads become rows."""
        pd.DataFrame({"I": [0.0, 1.0, 2.0], "II": [3.0, 4.0, 5.0]}).to_csv(tmp_path / "sig.csv", index=False)
        record = Record(
            record_id="r1", source_id="s", age=None, sex="male", labels=frozenset(),
            payload=SignalRef(path="sig.csv", fs_hz=500.0, n_leads=2), normal=True,
        )
        signal = load_signal(record, str(tmp_path))
        assert signal.shape == (2, 3)
        np.testing.assert_array_equal(signal[1], [3.0, 4.0, 5.0])

    def test_load_signal_lead_mismatch(self, tmp_path):
        """Test that a lead count different from the manifest raises DataError."""
        pd.DataFrame([[0.0, 1.0], [2.0, 3.0]]).to_csv(tmp_path / "sig.csv", index=False, header=False)
        record = Record(
            record_id="r1", source_id="s", age=None, sex="male", labels=frozenset(),
            payload=SignalRef(path="sig.csv", fs_hz=500.0, n_leads=12), normal=True,
        )
        with pytest.raises(DataError):
            load_signal(record, str(tmp_path))
