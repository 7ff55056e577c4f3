"""
Unit tests for the models module.
"""

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from src.dataset import LabelMatrix, LabelSpace
from src.errors import ConfigError
from src.metrics import roc_auc
from src.models import (
    GbdtModel,
    OvrModel,
    TrainConfig,
    fit_gbdt,
    fit_logistic,
    fit_ovr,
    fit_softmax,
    get_fitter,
    load_model,
    logistic_loss_and_grad,
    predict_classes,
    predict_proba,
    predict_scores,
    register_model_kind,
    save_model,
    softmax_loss_and_grad,
)


def label_matrix(columns, labels):
    return LabelMatrix(np.column_stack(columns).astype(np.uint8), LabelSpace(tuple(labels)))


def separable_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    return X, label_matrix([X[:, 0] > 0, X[:, 1] > 0.3], ["a", "b"])


class TestTrainConfig:
    """Tests for TrainConfig validation."""

    def test_defaults(self):
        """Test the documented defaults."""
        cfg = TrainConfig()
        assert (cfg.max_iter, cfg.n_rounds, cfg.max_depth, cfg.learning_rate) == (2000, 100, 6, 0.3)

    @pytest.mark.parametrize("kwargs", [{"max_iter": 0}, {"tol": 0.0}, {"l2": -1.0}, {"max_depth": 0}])
    def test_invalid_values(self, kwargs):
        """Test that invalid values raise ConfigError."""
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestGradients:
    """Finite-difference checks of the analytic gradients."""

    def test_logistic_gradient(self):
        """Test the binary loss gradient at random points."""
        rng = np.random.default_rng(1)
        X = rng.normal(size=(30, 4))
        y = (rng.random(30) < 0.4).astype(float)
        for _ in range(10):
            params = rng.normal(size=5)
            _, grad = logistic_loss_and_grad(params, X, y, 0.1)
            numeric = np.array([
                (logistic_loss_and_grad(params + e, X, y, 0.1)[0]
                 - logistic_loss_and_grad(params - e, X, y, 0.1)[0]) / 2e-6
                for e in np.eye(5) * 1e-6
            ])
            assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-8)

    def test_softmax_gradient(self):
        """Test the multiclass loss gradient at random points."""
        rng = np.random.default_rng(2)
        X = rng.normal(size=(25, 3))
        Y = np.eye(3)[rng.integers(0, 3, size=25)]
        n_params = 3 * 3 + 3
        for _ in range(10):
            params = rng.normal(size=n_params)
            _, grad = softmax_loss_and_grad(params, X, Y, 0.05)
            numeric = np.array([
                (softmax_loss_and_grad(params + e, X, Y, 0.05)[0]
                 - softmax_loss_and_grad(params - e, X, Y, 0.05)[0]) / 2e-6
                for e in np.eye(n_params) * 1e-6
            ])
            assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-8)


class TestFitOvr:
    """Tests for fit_ovr and predict_scores."""

    def test_separable_training_auc(self):
        """Test that separable labels reach training AUC 1.0."""
        X, lm = separable_data()
        sm = predict_scores(fit_ovr(X, lm, TrainConfig()), X)
        for code in lm.labels:
            assert roc_auc(sm.column(code), lm.column(code)) == 1.0

    def test_all_zero_label_skipped(self):
        """Test that a label without positives is skipped and scores 0."""
        X, lm = separable_data()
        lm = label_matrix([lm.column("a"), np.zeros(X.shape[0])], ["a", "empty"])
        model = fit_ovr(X, lm, TrainConfig())
        assert model.skipped == ("empty",)
        assert np.all(predict_scores(model, X).column("empty") == 0.0)

    def test_all_one_label_skipped(self):
        """Test that a label without negatives is skipped and scores 0."""
        X, lm = separable_data()
        lm = label_matrix([lm.column("a"), np.ones(X.shape[0])], ["a", "full"])
        model = fit_ovr(X, lm, TrainConfig())
        assert model.skipped == ("full",)
        assert np.all(predict_scores(model, X).column("full") == 0.0)

    def test_huge_penalty_gives_base_rate(self):
        """Test that strong regularization pushes scores to the base rate."""
        X, lm = separable_data()
        sm = predict_scores(fit_ovr(X, lm, TrainConfig(l2=1e4)), X)
        assert np.allclose(sm.column("a"), lm.column("a").mean(), atol=1e-2)

    def test_matches_binary_logistic(self):
        """Test that one label reduces to a plain binary logistic fit."""
        X, lm = separable_data(seed=3)
        X = X + np.random.default_rng(9).normal(scale=1.5, size=X.shape)
        single = lm.select(["a"])
        model = fit_ovr(X, single, TrainConfig(l2=0.1))
        Z = (X - model.mean) / model.scale
        w, b = fit_logistic(Z, single.column("a"), 0.1)
        np.testing.assert_allclose(model.coef[0], w)
        assert model.intercept[0] == pytest.approx(b)

    def test_agrees_with_sklearn(self):
        """Test agreement with scikit-learn's L2 logistic regression."""
        rng = np.random.default_rng(4)
        X = rng.normal(size=(300, 3))
        y = (X @ [1.0, -2.0, 0.5] + rng.normal(size=300) > 0).astype(int)
        l2 = 0.01
        model = fit_ovr(X, label_matrix([y], ["y"]), TrainConfig(l2=l2, tol=1e-8))
        Z = (X - model.mean) / model.scale
        reference = LogisticRegression(C=1.0 / (l2 * X.shape[0]), tol=1e-10, max_iter=5000).fit(Z, y)
        np.testing.assert_allclose(model.coef[0], reference.coef_[0], rtol=1e-3, atol=1e-4)

    def test_zero_weights_give_half(self):
        """Test that zero weights and intercept score 0.5."""
        model = OvrModel(
            labels=("a",), coef=np.zeros((1, 2)), intercept=np.zeros(1),
            mean=np.zeros(2), scale=np.ones(2),
        )
        assert np.all(model.scores(np.ones((3, 2))) == 0.5)

    def test_monotone_in_positive_weight(self):
        """Test that raising a positively weighted feature raises the score."""
        model = OvrModel(
            labels=("a",), coef=np.array([[2.0, 0.0]]), intercept=np.zeros(1),
            mean=np.zeros(2), scale=np.ones(2),
        )
        scores = model.scores(np.array([[0.0, 1.0], [0.5, 1.0]]))
        assert scores[1, 0] > scores[0, 0]

    def test_empty_rows_and_dimension_mismatch(self):
        """Test m = 0 scoring and a wrong feature dimension."""
        X, lm = separable_data()
        model = fit_ovr(X, lm, TrainConfig())
        assert predict_scores(model, np.zeros((0, 2))).shape == (0, 2)
        with pytest.raises(ValueError):
            predict_scores(model, np.zeros((3, 5)))

    def test_empty_inputs_rejected(self):
        """Test that n = 0 or d = 0 raises ValueError."""
        _, lm = separable_data()
        with pytest.raises(ValueError):
            fit_ovr(np.zeros((200, 0)), lm, TrainConfig())
        with pytest.raises(ValueError):
            fit_ovr(np.zeros((0, 2)), lm.rows([]), TrainConfig())

    def test_deterministic(self):
        """Test that identical inputs give identical scores."""
        X, lm = separable_data()
        first = predict_scores(fit_ovr(X, lm, TrainConfig()), X).values
        second = predict_scores(fit_ovr(X, lm, TrainConfig()), X).values
        assert np.array_equal(first, second)


class TestFitSoftmax:
    """Tests for fit_softmax."""

    def test_separated_clouds(self):
        """Test that two clouds 4 sigma apart are told apart."""
        rng = np.random.default_rng(6)
        X = np.vstack([rng.normal(0, 1, size=(200, 2)), rng.normal(4, 1, size=(200, 2))])
        classes = ["s0"] * 200 + ["s1"] * 200
        order = rng.permutation(400)
        train, test = order[:300], order[300:]
        model = fit_softmax(X[train], np.array(classes)[train], TrainConfig())
        predicted = predict_classes(model, X[test])
        assert np.mean(predicted == np.array(classes)[test]) > 0.95

    def test_identical_distributions_near_majority(self):
        """Test that indistinguishable classes give about the majority share."""
        rng = np.random.default_rng(7)
        X = rng.normal(size=(2000, 3))
        classes = np.where(rng.random(2000) < 0.7, "big", "small")
        model = fit_softmax(X[:1500], classes[:1500], TrainConfig())
        accuracy = np.mean(predict_classes(model, X[1500:]) == classes[1500:])
        majority = np.mean(classes[1500:] == "big")
        assert abs(accuracy - majority) <= 0.05

    def test_rows_sum_to_one(self):
        """Test that probabilities sum to 1."""
        rng = np.random.default_rng(8)
        X = rng.normal(size=(60, 2))
        model = fit_softmax(X, np.array(["a", "b", "c"] * 20), TrainConfig())
        assert model.classes == ("a", "b", "c")
        assert np.allclose(predict_proba(model, X).sum(axis=1), 1.0, atol=1e-9)

    def test_single_class(self):
        """Test that a single class raises ValueError."""
        with pytest.raises(ValueError):
            fit_softmax(np.zeros((4, 2)), ["a"] * 4, TrainConfig())


class TestFitGbdt:
    """Tests for fit_gbdt."""

    def test_xor_learned(self):
        """Test that GBDT learns an XOR pattern logistic regression cannot."""
        rng = np.random.default_rng(10)
        X = rng.uniform(-1, 1, size=(400, 2))
        lm = label_matrix([(X[:, 0] > 0) ^ (X[:, 1] > 0)], ["xor"])
        gbdt_auc = roc_auc(predict_scores(fit_gbdt(X, lm, TrainConfig(n_rounds=30, max_depth=3)), X).column("xor"), lm.column("xor"))
        ovr_auc = roc_auc(predict_scores(fit_ovr(X, lm, TrainConfig()), X).column("xor"), lm.column("xor"))
        assert gbdt_auc > 0.9
        assert ovr_auc < 0.7

    def test_single_stump(self):
        """Test that one depth-1 round gives exactly two score values."""
        X, lm = separable_data()
        model = fit_gbdt(X, lm.select(["a"]), TrainConfig(n_rounds=1, max_depth=1))
        assert np.unique(predict_scores(model, X).values).size == 2

    def test_zero_rounds_base_rate(self):
        """Test that zero rounds score the training base rate."""
        X, lm = separable_data()
        model = fit_gbdt(X, lm, TrainConfig(n_rounds=0))
        sm = predict_scores(model, X)
        assert np.allclose(sm.column("b"), lm.column("b").mean())

    def test_skipped_labels(self):
        """Test that all-zero and all-one labels are skipped."""
        X, lm = separable_data()
        lm = label_matrix([lm.column("a"), np.zeros(X.shape[0]), np.ones(X.shape[0])], ["a", "empty", "full"])
        model = fit_gbdt(X, lm, TrainConfig(n_rounds=3))
        assert model.skipped == ("empty", "full")
        scores = predict_scores(model, X)
        assert np.all(scores.column("empty") == 0.0)
        assert np.all(scores.column("full") == 0.0)


class TestRegistryAndPersistence:
    """Tests for the model registry and JSON persistence."""

    def test_unknown_kind(self):
        """Test that an unknown kind raises ConfigError."""
        with pytest.raises(ConfigError):
            get_fitter("resnet")

    def test_register_kind(self):
        """Test that a registered learner is returned by get_fitter."""
        register_model_kind("ovr_copy", fit_ovr, OvrModel)
        assert get_fitter("ovr_copy") is fit_ovr

    def test_save_and_load_scores(self, tmp_path):
        """Test that a reloaded model scores identically."""
        X, lm = separable_data()
        for model in (fit_ovr(X, lm, TrainConfig()), fit_gbdt(X, lm, TrainConfig(n_rounds=5, max_depth=2))):
            path = save_model(model, str(tmp_path / f"{model.kind}.json"))
            loaded = load_model(path)
            assert type(loaded) in (OvrModel, GbdtModel)
            np.testing.assert_array_equal(predict_scores(loaded, X).values, predict_scores(model, X).values)
