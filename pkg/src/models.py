"""
Models module for SourceCV.
Classifier contract plus one-vs-rest logistic regression, softmax regression and boosted trees.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize
from scipy.special import expit, logsumexp, softmax

from src.dataset import LabelMatrix
from src.errors import ConfigError
from src.metrics import ScoreMatrix

logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1
BASE_RATE_CLIP = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """
    Training hyperparameters shared by all learners.

    max_iter, tol and l2 drive the logistic learners; the remaining fields
    pin the boosted-tree defaults.
    """

    max_iter: int = 2000
    tol: float = 1e-6
    l2: float = 1e-4
    seed: int = 0
    n_rounds: int = 100
    max_depth: int = 6
    learning_rate: float = 0.3
    n_bins: int = 256
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    gamma: float = 0.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be at least 1, got {self.max_iter}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be non-negative, got {self.l2}")
        if self.n_rounds < 0:
            raise ConfigError(f"n_rounds must be non-negative, got {self.n_rounds}")
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be at least 1, got {self.max_depth}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.n_bins < 2:
            raise ConfigError(f"n_bins must be at least 2, got {self.n_bins}")


# Logistic optimisation

def logistic_loss_and_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float):
    """
    Mean binary cross-entropy plus (l2 / 2) * ||w||^2 and its gradient.

    Args:
        params: Weights followed by the intercept (length d + 1)
        X: n x d inputs
        y: Binary targets
        l2: Penalty coefficient, intercept unpenalised

    Returns:
        Tuple of (loss, gradient)
    """
    w, b = params[:-1], params[-1]
    z = X @ w + b
    n = X.shape[0]
    loss = np.sum(np.logaddexp(0.0, z) - y * z) / n + 0.5 * l2 * np.dot(w, w)
    residual = expit(z) - y
    grad = np.empty_like(params)
    grad[:-1] = X.T @ residual / n + l2 * w
    grad[-1] = residual.sum() / n
    return loss, grad


def fit_logistic(
    X: np.ndarray, y: np.ndarray, l2: float, max_iter: int = 2000, tol: float = 1e-6
) -> Tuple[np.ndarray, float]:
    """
    Fit an L2-regularised binary logistic regression with L-BFGS.

    Returns:
        Tuple of (weights, intercept)
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    x0 = np.zeros(X.shape[1] + 1)
    result = minimize(
        logistic_loss_and_grad,
        x0,
        args=(X, y, l2),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15},
    )
    if not result.success:
        logger.warning(f"Logistic fit stopped after {result.nit} iterations: {result.message}")
    return result.x[:-1].copy(), float(result.x[-1])


def _standardization(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def _check_training_inputs(features: np.ndarray, n_rows: int) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"Features must be a 2-D array, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("Cannot train on zero records")
    if X.shape[1] == 0:
        raise ValueError("Cannot train on zero features")
    if X.shape[0] != n_rows:
        raise ValueError(f"Feature rows ({X.shape[0]}) do not match label rows ({n_rows})")
    return X


def _single_class_labels(lm: LabelMatrix) -> Tuple[str, ...]:
    """Labels whose training column is all zeros or all ones."""
    positives = lm.values.sum(axis=0)
    n = lm.shape[0]
    skipped = tuple(code for j, code in enumerate(lm.labels) if positives[j] in (0, n))
    if skipped:
        logger.warning(f"Skipping {len(skipped)} labels without both classes: {list(skipped)}")
    return skipped


def _check_dimension(X: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValueError(f"Expected {n_features} features, got shape {X.shape}")
    return X


# One-vs-rest logistic regression

@dataclass(frozen=True, eq=False)
class OvrModel:
    """One binary logistic model per label over standardised features."""

    labels: Tuple[str, ...]
    coef: np.ndarray
    intercept: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    skipped: Tuple[str, ...] = ()
    kind: str = field(default="logistic", init=False)

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    def scores(self, features) -> np.ndarray:
        X = _check_dimension(features, self.n_features)
        z = ((X - self.mean) / self.scale) @ self.coef.T + self.intercept
        out = expit(z)
        for code in self.skipped:
            out[:, self.labels.index(code)] = 0.0
        return out

    def to_dict(self) -> Dict:
        return {
            "labels": list(self.labels),
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "OvrModel":
        n_features = len(data["mean"])
        return cls(
            labels=tuple(data["labels"]),
            coef=np.asarray(data["coef"], dtype=float).reshape(len(data["labels"]), n_features),
            intercept=np.asarray(data["intercept"], dtype=float),
            mean=np.asarray(data["mean"], dtype=float),
            scale=np.asarray(data["scale"], dtype=float),
            skipped=tuple(data["skipped"]),
        )


def fit_ovr(features, lm: LabelMatrix, cfg: TrainConfig) -> OvrModel:
    """
    Fit one L2 logistic regression per label.

    Labels whose training slice has no positives or no negatives are
    skipped and score 0.

    Args:
        features: n x d training inputs
        lm: Training labels
        cfg: Training configuration

    Returns:
        Fitted OvrModel

    Raises:
        ValueError: Empty inputs or row mismatch
    """
    X = _check_training_inputs(features, lm.shape[0])
    mean, scale = _standardization(X)
    Z = (X - mean) / scale

    skipped = _single_class_labels(lm)

    fit_columns = [j for j, code in enumerate(lm.labels) if code not in skipped]
    fits = Parallel(n_jobs=cfg.n_jobs)(
        delayed(fit_logistic)(Z, lm.values[:, j], cfg.l2, cfg.max_iter, cfg.tol) for j in fit_columns
    )

    coef = np.zeros((len(lm.labels), X.shape[1]))
    intercept = np.zeros(len(lm.labels))
    for j, (w, b) in zip(fit_columns, fits):
        coef[j] = w
        intercept[j] = b

    logger.debug(f"Fitted {len(fit_columns)} logistic models on {X.shape[0]} x {X.shape[1]} inputs")
    return OvrModel(
        labels=tuple(lm.labels), coef=coef, intercept=intercept, mean=mean, scale=scale, skipped=skipped
    )


# Softmax regression

def softmax_loss_and_grad(params: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float):
    """Mean multiclass cross-entropy plus (l2 / 2) * ||W||^2 and its gradient."""
    n, d = X.shape
    n_classes = Y.shape[1]
    W = params[: n_classes * d].reshape(n_classes, d)
    b = params[n_classes * d:]
    Z = X @ W.T + b
    loss = np.sum(logsumexp(Z, axis=1) - np.sum(Y * Z, axis=1)) / n + 0.5 * l2 * np.sum(W * W)
    residual = softmax(Z, axis=1) - Y
    grad_W = residual.T @ X / n + l2 * W
    grad_b = residual.sum(axis=0) / n
    return loss, np.concatenate([grad_W.ravel(), grad_b])


@dataclass(frozen=True, eq=False)
class SoftmaxModel:
    """Multiclass logistic model; classes are source ids in sorted order."""

    classes: Tuple[str, ...]
    coef: np.ndarray
    intercept: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    kind: str = field(default="softmax", init=False)

    @property
    def labels(self) -> Tuple[str, ...]:
        return self.classes

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    def scores(self, features) -> np.ndarray:
        return predict_proba(self, features)

    def to_dict(self) -> Dict:
        return {
            "classes": list(self.classes),
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SoftmaxModel":
        n_features = len(data["mean"])
        return cls(
            classes=tuple(data["classes"]),
            coef=np.asarray(data["coef"], dtype=float).reshape(len(data["classes"]), n_features),
            intercept=np.asarray(data["intercept"], dtype=float),
            mean=np.asarray(data["mean"], dtype=float),
            scale=np.asarray(data["scale"], dtype=float),
        )


def fit_softmax(features, classes: Sequence[str], cfg: TrainConfig) -> SoftmaxModel:
    """
    Fit an L2-regularised softmax regression.

    Args:
        features: n x d inputs
        classes: Class label (source id) per row
        cfg: Training configuration

    Raises:
        ValueError: Fewer than two classes, or empty inputs
    """
    y = np.asarray([str(c) for c in classes])
    X = _check_training_inputs(features, y.size)
    class_names, y_idx = np.unique(y, return_inverse=True)
    if class_names.size < 2:
        logger.error("Softmax training needs at least two classes")
        raise ValueError(f"Softmax training needs at least two classes, got {class_names.tolist()}")

    mean, scale = _standardization(X)
    Z = (X - mean) / scale
    Y = np.eye(class_names.size)[y_idx]
    n_classes, d = class_names.size, X.shape[1]

    result = minimize(
        softmax_loss_and_grad,
        np.zeros(n_classes * (d + 1)),
        args=(Z, Y, cfg.l2),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": cfg.max_iter, "gtol": cfg.tol, "ftol": 1e-15},
    )
    if not result.success:
        logger.warning(f"Softmax fit stopped after {result.nit} iterations: {result.message}")

    logger.debug(f"Fitted softmax over {n_classes} classes in {result.nit} iterations")
    return SoftmaxModel(
        classes=tuple(class_names.tolist()),
        coef=result.x[: n_classes * d].reshape(n_classes, d).copy(),
        intercept=result.x[n_classes * d:].copy(),
        mean=mean,
        scale=scale,
    )


def predict_proba(model: SoftmaxModel, features) -> np.ndarray:
    """Class probabilities, rows summing to 1."""
    X = _check_dimension(features, model.n_features)
    Z = ((X - model.mean) / model.scale) @ model.coef.T + model.intercept
    return softmax(Z, axis=1)


def predict_classes(model: SoftmaxModel, features) -> np.ndarray:
    """Most probable class per row."""
    proba = predict_proba(model, features)
    return np.asarray(model.classes, dtype=object)[np.argmax(proba, axis=1)]


# Gradient-boosted trees

@dataclass(frozen=True, eq=False)
class RegressionTree:
    """
    Flat-array regression tree. Rows go left when x[feature] < threshold.

    A node is a leaf when feature == -1; leaf values already include the
    learning rate.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        while True:
            feat = self.feature[node]
            active = np.flatnonzero(feat >= 0)
            if active.size == 0:
                break
            current = node[active]
            go_left = X[active, feat[active]] < self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
        return self.value[node]

    def to_dict(self) -> Dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RegressionTree":
        return cls(
            feature=np.asarray(data["feature"], dtype=int),
            threshold=np.asarray(data["threshold"], dtype=float),
            left=np.asarray(data["left"], dtype=int),
            right=np.asarray(data["right"], dtype=int),
            value=np.asarray(data["value"], dtype=float),
        )


def _bin_edges(X: np.ndarray, n_bins: int) -> List[np.ndarray]:
    """Quantile cut points per feature (at most n_bins - 1)."""
    quantiles = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    edges = []
    for j in range(X.shape[1]):
        cuts = np.unique(np.quantile(X[:, j], quantiles))
        # a cut at the minimum would leave the left side empty
        edges.append(cuts[cuts > X[:, j].min()])
    return edges


class _TreeBuilder:
    """Depth-wise second-order tree growth on pre-binned features."""

    def __init__(self, binned: np.ndarray, edges: List[np.ndarray], cfg: TrainConfig):
        self.binned = binned
        self.edges = edges
        self.cfg = cfg
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def _best_split(self, rows: np.ndarray, g: np.ndarray, h: np.ndarray):
        lam = self.cfg.reg_lambda
        G, H = g[rows].sum(), h[rows].sum()
        parent = G * G / (H + lam)
        best = (0.0, -1, -1)
        for j, cuts in enumerate(self.edges):
            if cuts.size == 0:
                continue
            n_bins = cuts.size + 1
            bins = self.binned[rows, j]
            hist_g = np.bincount(bins, weights=g[rows], minlength=n_bins)
            hist_h = np.bincount(bins, weights=h[rows], minlength=n_bins)
            GL = np.cumsum(hist_g)[:-1]
            HL = np.cumsum(hist_h)[:-1]
            GR, HR = G - GL, H - HL
            gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - self.cfg.gamma
            allowed = (HL >= self.cfg.min_child_weight) & (HR >= self.cfg.min_child_weight)
            if not allowed.any():
                continue
            gain = np.where(allowed, gain, -np.inf)
            k = int(np.argmax(gain))
            if gain[k] > best[0]:
                best = (float(gain[k]), j, k)
        return best

    def grow(self, rows: np.ndarray, g: np.ndarray, h: np.ndarray, depth: int) -> int:
        node = self._new_node()
        G, H = g[rows].sum(), h[rows].sum()
        self.value[node] = -self.cfg.learning_rate * G / (H + self.cfg.reg_lambda)
        if depth >= self.cfg.max_depth or rows.size < 2:
            return node

        gain, j, k = self._best_split(rows, g, h)
        if j < 0:
            return node

        go_left = self.binned[rows, j] <= k
        self.feature[node] = j
        self.threshold[node] = float(self.edges[j][k])
        left = self.grow(rows[go_left], g, h, depth + 1)
        right = self.grow(rows[~go_left], g, h, depth + 1)
        self.left[node] = left
        self.right[node] = right
        return node

    def build(self, g: np.ndarray, h: np.ndarray) -> RegressionTree:
        self.grow(np.arange(self.binned.shape[0]), g, h, 0)
        return RegressionTree(
            feature=np.asarray(self.feature, dtype=int),
            threshold=np.asarray(self.threshold, dtype=float),
            left=np.asarray(self.left, dtype=int),
            right=np.asarray(self.right, dtype=int),
            value=np.asarray(self.value, dtype=float),
        )


def _boost_label(
    X: np.ndarray, binned: np.ndarray, edges: List[np.ndarray], y: np.ndarray, cfg: TrainConfig
) -> Tuple[float, List[RegressionTree]]:
    rate = float(np.clip(y.mean(), BASE_RATE_CLIP, 1.0 - BASE_RATE_CLIP))
    base = float(np.log(rate / (1.0 - rate)))
    margin = np.full(y.size, base)
    trees = []
    for _ in range(cfg.n_rounds):
        p = expit(margin)
        g = p - y
        h = p * (1.0 - p)
        tree = _TreeBuilder(binned, edges, cfg).build(g, h)
        margin += tree.predict(X)
        trees.append(tree)
    return base, trees


@dataclass(frozen=True, eq=False)
class GbdtModel:
    """Per-label boosted trees on logistic loss."""

    labels: Tuple[str, ...]
    base_scores: np.ndarray
    trees: Tuple[Tuple[RegressionTree, ...], ...]
    n_features: int
    skipped: Tuple[str, ...] = ()
    kind: str = field(default="gbdt", init=False)

    def scores(self, features) -> np.ndarray:
        X = _check_dimension(features, self.n_features)
        out = np.zeros((X.shape[0], len(self.labels)))
        for j, code in enumerate(self.labels):
            if code in self.skipped:
                continue
            margin = np.full(X.shape[0], self.base_scores[j])
            for tree in self.trees[j]:
                margin += tree.predict(X)
            out[:, j] = expit(margin)
        return out

    def to_dict(self) -> Dict:
        return {
            "labels": list(self.labels),
            "base_scores": self.base_scores.tolist(),
            "trees": [[tree.to_dict() for tree in label_trees] for label_trees in self.trees],
            "n_features": self.n_features,
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "GbdtModel":
        return cls(
            labels=tuple(data["labels"]),
            base_scores=np.asarray(data["base_scores"], dtype=float),
            trees=tuple(
                tuple(RegressionTree.from_dict(t) for t in label_trees) for label_trees in data["trees"]
            ),
            n_features=int(data["n_features"]),
            skipped=tuple(data["skipped"]),
        )


def fit_gbdt(features, lm: LabelMatrix, cfg: TrainConfig) -> GbdtModel:
    """
    Fit one boosted-tree ensemble per label on logistic loss.

    Split finding uses quantile histograms (cfg.n_bins). The base score is
    the logit of the label's training base rate.

    Raises:
        ValueError: Empty inputs or row mismatch
    """
    X = _check_training_inputs(features, lm.shape[0])
    edges = _bin_edges(X, cfg.n_bins)
    binned = np.column_stack(
        [np.searchsorted(cuts, X[:, j], side="right") for j, cuts in enumerate(edges)]
    )

    skipped = _single_class_labels(lm)

    fit_columns = [j for j, code in enumerate(lm.labels) if code not in skipped]
    fits = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_boost_label)(X, binned, edges, lm.values[:, j].astype(float), cfg) for j in fit_columns
    )

    base_scores = np.zeros(len(lm.labels))
    trees: List[Tuple[RegressionTree, ...]] = [() for _ in lm.labels]
    for j, (base, label_trees) in zip(fit_columns, fits):
        base_scores[j] = base
        trees[j] = tuple(label_trees)

    logger.debug(f"Boosted {cfg.n_rounds} rounds for {len(fit_columns)} labels")
    return GbdtModel(
        labels=tuple(lm.labels),
        base_scores=base_scores,
        trees=tuple(trees),
        n_features=X.shape[1],
        skipped=skipped,
    )


# Contract, registry and persistence

MODEL_KINDS: Dict[str, Callable] = {
    "logistic": fit_ovr,
    "gbdt": fit_gbdt,
}

_MODEL_CLASSES = {
    "logistic": OvrModel,
    "softmax": SoftmaxModel,
    "gbdt": GbdtModel,
}


def register_model_kind(name: str, fit_fn: Callable, model_class: Optional[type] = None) -> None:
    """
    Register a multilabel learner under a config name.

    fit_fn(features, lm, cfg) must return an object with scores(features),
    labels and to_dict(). Passing model_class (with from_dict) enables load_model.
    """
    if name in MODEL_KINDS:
        logger.warning(f"Model kind {name!r} is being replaced")
    MODEL_KINDS[name] = fit_fn
    if model_class is not None:
        _MODEL_CLASSES[name] = model_class


def get_fitter(kind: str) -> Callable:
    """Fit function registered for a model kind."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"Unknown model kind {kind!r}, expected one of {sorted(MODEL_KINDS)}")
    return MODEL_KINDS[kind]


def predict_scores(model, features) -> ScoreMatrix:
    """
    Score matrix of a fitted model.

    Raises:
        ValueError: Feature dimension differs from training
    """
    values = model.scores(features)
    return ScoreMatrix(values, tuple(model.labels))


def save_model(model, path: str) -> str:
    """
    Write a fitted model as versioned JSON.

    Raises:
        IOError: If the file cannot be written
    """
    payload = {"schema_version": MODEL_SCHEMA_VERSION, "kind": model.kind, "model": model.to_dict()}
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True)
    except OSError as e:
        logger.error(f"Failed to save model to {out}: {e}")
        raise IOError(f"Failed to save model to {out}: {e}")
    logger.info(f"Model saved to {out}")
    return str(out)


def load_model(path: str):
    """
    Read a model written by save_model.

    Raises:
        ValueError: Unknown schema version or kind
    """
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    version = payload.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise ValueError(f"Unsupported model schema version {version}")
    kind = payload.get("kind")
    if kind not in _MODEL_CLASSES:
        raise ValueError(f"Unknown model kind {kind!r} in {path}")
    return _MODEL_CLASSES[kind].from_dict(payload["model"])
