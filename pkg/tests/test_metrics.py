"""
Unit tests for the metrics module.
"""

import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from src.dataset import LabelMatrix, LabelSpace
from src.metrics import (
    ScoreMatrix,
    confusion_and_accuracy,
    macro_auc,
    majority_baseline,
    micro_auc,
    per_label_auc,
    reliability,
    roc_auc,
    valid_labels,
)


def pair_count_auc(scores, truth):
    """O(n^2) oracle: P(score+ > score-) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth).astype(bool)
    pos, neg = scores[truth], scores[~truth]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (pos.size * neg.size)


def matrices(scores, truth, labels):
    space = LabelSpace(tuple(labels))
    return ScoreMatrix(np.asarray(scores, dtype=float), space.labels), LabelMatrix(np.asarray(truth), space)


class TestRocAuc:
    """Tests for roc_auc function."""

    def test_perfect_ranking(self):
        """Test that a perfect ranking gives 1.0."""
        assert roc_auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties(self):
        """Test that all-equal scores give 0.5."""
        assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_hand_computed_with_ties(self):
        """Test four pairs with one tie: 3 wins plus half a tie over 4 pairs."""
        assert roc_auc([0.2, 0.8, 0.5, 0.5], [0, 1, 1, 0]) == pytest.approx(0.875)
        assert roc_auc([0.2, 0.8, 0.5, 0.5], [0, 1, 1, 0]) == pytest.approx(roc_auc_score([0, 1, 1, 0], [0.2, 0.8, 0.5, 0.5]))

    def test_single_class_raises(self):
        """Test that single-class truth raises ValueError."""
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        """Test that differing lengths raise ValueError."""
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2, 0.3], [1, 0])

    def test_matches_pair_counting(self):
        """Test that the rank formula equals the pair-counting oracle."""
        rng = np.random.default_rng(11)
        for n in (5, 37, 200):
            scores = np.round(rng.random(n), 2)
            truth = rng.random(n) < 0.4
            truth[:2] = [True, False]
            assert roc_auc(scores, truth) == pytest.approx(pair_count_auc(scores, truth), abs=1e-12)

    def test_matches_sklearn(self):
        """Test agreement with scikit-learn."""
        rng = np.random.default_rng(5)
        scores = rng.normal(size=300)
        truth = rng.random(300) < 0.3
        assert roc_auc(scores, truth) == pytest.approx(roc_auc_score(truth, scores))

    def test_negation_and_monotone_transform(self):
        """Test the complement under negation and invariance under increasing maps."""
        rng = np.random.default_rng(2)
        scores = rng.normal(size=100)
        truth = rng.random(100) < 0.5
        auc = roc_auc(scores, truth)
        assert auc + roc_auc(-scores, truth) == pytest.approx(1.0)
        assert roc_auc(np.exp(3 * scores), truth) == pytest.approx(auc)


class TestMacroMicroAuc:
    """Tests for valid_labels, macro_auc and micro_auc."""

    def test_macro_is_mean(self):
        """Test that per-label AUCs 1.0 and 0.5 average to 0.75."""
        sm, lm = matrices(
            [[0.9, 0.5], [0.1, 0.5], [0.8, 0.5], [0.2, 0.5]],
            [[1, 1], [0, 0], [1, 0], [0, 1]],
            ["a", "b"],
        )
        assert macro_auc(sm, lm, ["a", "b"]) == pytest.approx(0.75)

    def test_label_without_eval_positives_excluded(self):
        """Test that a label absent from the evaluation positives is excluded."""
        train = LabelMatrix(np.array([[1, 1], [0, 0]]), LabelSpace(("a", "b")))
        sm, lm = matrices([[0.9, 0.1], [0.2, 0.7]], [[1, 0], [0, 0]], ["a", "b"])
        valid = valid_labels(train, lm)
        assert valid == ["a"]
        assert macro_auc(sm, lm, valid) == 1.0

    def test_label_without_train_positives_excluded(self):
        """Test that a label never positive in training is excluded."""
        train = LabelMatrix(np.array([[1, 0], [0, 0]]), LabelSpace(("a", "b")))
        evaluation = LabelMatrix(np.array([[1, 1], [0, 0]]), LabelSpace(("a", "b")))
        assert valid_labels(train, evaluation) == ["a"]

    def test_identical_columns(self):
        """Test that identical columns give the shared AUC."""
        rng = np.random.default_rng(8)
        column = rng.random(40)
        truth = (rng.random(40) < 0.5).astype(int)
        truth[:2] = [0, 1]
        sm, lm = matrices(np.column_stack([column, column]), np.column_stack([truth, truth]), ["a", "b"])
        assert macro_auc(sm, lm, ["a", "b"]) == pytest.approx(roc_auc(column, truth))

    def test_empty_valid_raises(self):
        """Test that no valid label raises ValueError."""
        sm, lm = matrices([[0.1], [0.2]], [[1], [0]], ["a"])
        with pytest.raises(ValueError):
            macro_auc(sm, lm, [])
        with pytest.raises(ValueError):
            micro_auc(sm, lm, [])

    def test_micro_single_label(self):
        """Test that micro equals the per-label AUC for one label."""
        sm, lm = matrices([[0.1], [0.7], [0.4], [0.3]], [[0], [1], [0], [1]], ["a"])
        assert micro_auc(sm, lm, ["a"]) == pytest.approx(per_label_auc(sm, lm, ["a"])["a"])

    def test_micro_pooled_against_oracle(self):
        """Test opposite-ranking labels on disjoint score ranges against pooled pair counting."""
        scores = [[0.9, 0.1], [0.8, 0.2], [0.7, 0.3], [0.6, 0.4]]
        truth = [[1, 1], [0, 1], [0, 0], [0, 0]]
        sm, lm = matrices(scores, truth, ["a", "b"])
        aucs = per_label_auc(sm, lm, ["a", "b"])
        assert aucs == {"a": 1.0, "b": 0.0}
        assert macro_auc(sm, lm, ["a", "b"]) == pytest.approx(0.5)
        assert micro_auc(sm, lm, ["a", "b"]) == pytest.approx(1 / 3)
        pooled_scores = np.array(scores).T.ravel()
        pooled_truth = np.array(truth).T.ravel()
        assert micro_auc(sm, lm, ["a", "b"]) == pytest.approx(pair_count_auc(pooled_scores, pooled_truth))

    def test_micro_all_positive_raises(self):
        """Test that an all-positive pooled truth raises ValueError."""
        sm, lm = matrices([[0.1, 0.2], [0.3, 0.4]], [[1, 1], [1, 1]], ["a", "b"])
        with pytest.raises(ValueError):
            micro_auc(sm, lm, ["a", "b"])


class TestReliability:
    """Tests for reliability function."""

    def test_zero_errors(self):
        """Test that perfect estimates give zero statistics."""
        report = reliability([(0.8, 0.8), (0.7, 0.7), (0.9, 0.9)])
        assert (report.me, report.sd, report.rmse) == (0.0, 0.0, 0.0)

    def test_hand_computed(self):
        """Test errors 0.1, 0.2, 0.3."""
        report = reliability([(0.6, 0.5), (0.7, 0.5), (0.8, 0.5)])
        assert report.me == pytest.approx(0.2)
        assert report.sd == pytest.approx(0.1)
        assert report.rmse == pytest.approx(0.2236, abs=1e-4)

    def test_rmse_identity(self):
        """Test rmse^2 = me^2 + sd^2 and signed errors."""
        rng = np.random.default_rng(4)
        pairs = list(zip(rng.random(7), rng.random(7)))
        report = reliability(pairs, context_ids=[f"c{i}" for i in range(7)])
        assert report.rmse ** 2 == pytest.approx(report.me ** 2 + report.sd ** 2, abs=1e-12)
        assert report.entries[3].context_id == "c3"
        assert report.entries[3].signed_error == pytest.approx(pairs[3][0] - pairs[3][1])
        assert report.n == 7

    def test_published_row_consistency(self):
        """Test that me 0.0468 and sd 0.0409 give rmse 0.0622."""
        assert math.sqrt(0.0468 ** 2 + 0.0409 ** 2) == pytest.approx(0.0622, abs=1e-4)

    def test_needs_two_pairs(self):
        """Test that a single pair raises ValueError."""
        with pytest.raises(ValueError):
            reliability([(0.8, 0.7)])

    def test_to_dict(self):
        """Test the serialisable form."""
        data = reliability([(0.6, 0.5), (0.7, 0.5)], context_ids=["x", "y"]).to_dict()
        assert data["n"] == 2
        assert [e["context_id"] for e in data["entries"]] == ["x", "y"]


class TestConfusionAndBaseline:
    """Tests for confusion_and_accuracy and majority_baseline."""

    def test_perfect_predictions(self):
        """Test that perfect predictions give a diagonal matrix."""
        matrix, accuracy = confusion_and_accuracy(["a", "b", "b"], ["a", "b", "b"], ["a", "b"])
        assert matrix.tolist() == [[1, 0], [0, 2]]
        assert accuracy == 1.0

    def test_swapped_classes(self):
        """Test that fully swapped predictions give accuracy 0."""
        matrix, accuracy = confusion_and_accuracy(["b", "a"], ["a", "b"], ["a", "b"])
        assert np.trace(matrix) == 0
        assert accuracy == 0.0

    def test_rows_are_truth(self):
        """Test that rows index truth and columns prediction."""
        matrix, _ = confusion_and_accuracy(["b", "b"], ["a", "b"], ["a", "b"])
        assert matrix.tolist() == [[0, 1], [0, 1]]

    def test_empty_input(self):
        """Test that empty input raises ValueError."""
        with pytest.raises(ValueError):
            confusion_and_accuracy([], [], ["a"])

    def test_majority_share(self):
        """Test that constant majority prediction scores the majority share."""
        truth = ["s1"] * 424 + ["s2"] * 300 + ["s3"] * 276
        assert majority_baseline(truth, truth) == pytest.approx(0.424)
